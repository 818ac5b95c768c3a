import math
import sys
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from hdjscc.baselines import (CodedModulationEntry, LearnedCodec, SubprocessCodec, capacity, capacity_budget,
                              codebook_size, complex_real_view, digital_baseline, fit_to_budget, lloyd_train,
                              load_mcs_table, mean_image_uint8, naive_vq_baseline, select_mcs, vq_forward)
from hdjscc.data import to_tensor
from hdjscc.errors import ConfigurationError, ShapeError
from hdjscc.metrics import psnr_per_image
from hdjscc.pipeline import HDJSCC

CODEC = Path(__file__).parent / "tools" / "jpeg_codec.py"


def test_lloyd_gaussian_fixed_point():
    x = np.random.default_rng(0).normal(size=200000)
    cb = lloyd_train(x, 1, 1, seed=0)
    c = np.sort(cb.centroids.ravel())
    assert np.allclose(c, [-math.sqrt(2 / math.pi), math.sqrt(2 / math.pi)], atol=0.01)


def test_lloyd_constant_samples():
    cb = lloyd_train(np.full(100, 3.0), 1, 1)
    assert cb.degenerate and np.all(cb.centroids == 3.0) and cb.distortions[-1] == 0.0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([(1, 2), (2, 1), (2, 2), (3, 1)]))
def test_lloyd_monotone_distortion(seed, shape):
    n_v, bits = shape
    x = np.random.default_rng(seed).standard_t(4, size=(4000, n_v))
    cb = lloyd_train(x, n_v, bits, seed=seed)
    d = np.array(cb.distortions)
    assert np.all(np.diff(d) <= 0)
    assert cb.size == codebook_size(n_v, bits)


def test_lloyd_input_checks():
    with pytest.raises(ValueError):
        lloyd_train(np.zeros(5), 1, 1)
    with pytest.raises(ConfigurationError):
        codebook_size(2, 0.3)


def test_vq_accounting_and_rows():
    rng = np.random.default_rng(1)
    y = torch.complex(torch.randn(3, 768), torch.randn(3, 768))
    cb = lloyd_train(rng.normal(size=(20000, 2)), 2, 1)
    res = vq_forward(y, cb, (32, 32))
    assert res.bpp == 1.5
    assert len(res.bits) == 3 * 2 * 768 * 1
    rows = complex_real_view(res.y_hat).reshape(-1, 2)
    assert all(any(np.allclose(r, c, atol=1e-6) for c in cb.centroids) for r in rows[:200])
    with pytest.raises(ShapeError):
        vq_forward(y, lloyd_train(rng.normal(size=(20000, 5)), 5, 1))


def test_complex_real_view_order():
    y = torch.tensor([[1 + 2j, 3 + 4j]])
    assert complex_real_view(y).tolist() == [[1, 3, 2, 4]]


def test_capacity_examples():
    assert round(capacity(2.0), 2) == 1.37
    table = load_mcs_table()
    e = select_mcs(table, 2.0)
    assert e.spectral_efficiency == 1.0 and e.modulation_order == 2 and e.code_rate == 0.5
    assert math.floor(768 * e.spectral_efficiency) == 768
    assert abs(capacity_budget(5.0, 3072) - 6298) / 6298 < 0.005
    assert select_mcs(table, -10.0) is None


def test_mcs_table_from_file(tmp_path):
    p = tmp_path / "mcs.yaml"
    p.write_text("entries:\n  - {rate: '2/3', order: 2, min_snr_db: 3}\n  - {rate: 0.5, order: 1, min_snr_db: 0}\n")
    t = load_mcs_table(p)
    assert [round(m.spectral_efficiency, 3) for m in t] == [0.5, 1.333]
    with pytest.raises(ConfigurationError):
        CodedModulationEntry(0.0, 2, 1.0)


class FixedCodec:
    """Codec stub whose output size is ``quality`` bytes."""
    qualities = [10, 50, 100, 400]

    def encode(self, image, quality):
        return bytes(quality)

    def decode(self, data):
        return self.image


def test_digital_cliff():
    rng = np.random.default_rng(2)
    imgs = rng.integers(0, 256, (6, 32, 32, 3), dtype=np.uint8)
    codec = FixedCodec()
    codec.image = imgs[0]
    mean = mean_image_uint8(imgs)
    table = load_mcs_table()
    # designed for 5 dB; at 1 dB the block fails and the mean image is delivered
    low = digital_baseline(imgs, 1.0, table, codec, 768, mean, design_snr_db=5.0)
    ref = float(np.mean(psnr_per_image(to_tensor(imgs), to_tensor(np.repeat(mean[None], 6, 0)))))
    assert low.success_rate == 0 and abs(low.psnr - ref) < 1e-9
    hi = digital_baseline(imgs, 9.0, table, codec, 768, mean, design_snr_db=5.0)
    at = digital_baseline(imgs, 5.0, table, codec, 768, mean, design_snr_db=5.0)
    assert hi.success_rate == 1 and hi.psnr == at.psnr  # leveling above the design point
    assert hi.budget_bits == math.floor(768 * select_mcs(table, 5.0).spectral_efficiency)
    assert 8 * 100 <= hi.budget_bits


def test_fit_to_budget():
    codec = FixedCodec()
    assert fit_to_budget(codec, None, 8 * 60)[1] == 50
    assert fit_to_budget(codec, None, 8 * 5) == (None, None)


def test_subprocess_codec_contract():
    enc = f"{sys.executable} {CODEC} encode {{quality}}"
    dec = f"{sys.executable} {CODEC} decode"
    codec = SubprocessCodec(enc, dec, [20, 90])
    img = np.kron(np.random.default_rng(3).integers(0, 256, (4, 4, 3)), np.ones((8, 8, 1))).astype(np.uint8)
    small, big = codec.encode(img, 20), codec.encode(img, 90)
    assert len(small) < len(big)
    out = codec.decode(big)
    assert out.shape == img.shape and np.abs(out.astype(int) - img).mean() < 10
    bad = SubprocessCodec(f"{sys.executable} -c 'import sys; sys.exit(3)'", dec, [1])
    with pytest.raises(RuntimeError):
        bad.encode(img, 1)


def test_learned_codec_roundtrip(images):
    model = HDJSCC(tiny_config()).eval()
    codec = LearnedCodec(model, 5.0)
    assert codec.qualities == [1, 2]
    data = codec.encode(images[0], 2)
    out = codec.decode(data)
    assert out.shape == images[0].shape and out.dtype == np.uint8


def test_naive_vq_baseline_runs(images):
    model = HDJSCC(tiny_config()).eval()
    train = np.concatenate([images] * 20)
    psnr, bpp, cb = naive_vq_baseline(model, train, images[:4], 5.0, n_v=2, bits=1)
    # c_out=4 at 32x32 gives k=128 complex uses, 256 reals, 1 bit each
    assert bpp == 256 / 1024 and np.isfinite(psnr) and cb.size == 4
