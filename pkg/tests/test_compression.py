import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from hdjscc import compression as cmp
from hdjscc.errors import ShapeError


def comp(**kw):
    cfg = cmp.CompressorConfig(**{"features": 8, "c_z": 256, "c_v": 192, **kw})
    return cmp.Compressor(cfg)


def test_quantize_round_examples():
    t = torch.tensor([0.49, -1.51, 2.5, -2.5, 3.0, -4.0])
    assert cmp.quantize_round(t).tolist() == [0.0, -2.0, 3.0, -3.0, 3.0, -4.0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=20))
def test_quantize_round_idempotent_on_integers(vals):
    t = torch.tensor(vals, dtype=torch.float64)
    assert torch.equal(cmp.quantize_round(t), t)


def test_quantize_noise_statistics():
    g = torch.Generator().manual_seed(0)
    t = torch.zeros(10**6, dtype=torch.float64)
    u = cmp.quantize_noise(t, g)
    assert float(u.abs().max()) <= 0.5
    sigma = math.sqrt(1 / 12)
    assert abs(float(u.mean())) < 3 * sigma / 1000
    assert abs(float(u.var()) - 1 / 12) / (1 / 12) < 0.02


def test_scaling_examples():
    t = torch.linspace(-3, 3, 60).reshape(1, 3, 4, 5)
    assert torch.equal(cmp.scale(t, torch.ones(3)), t)
    a = torch.rand(3) + 0.1
    assert torch.allclose(cmp.rescale(cmp.scale(t, a), 1 / a), t, atol=1e-6)
    assert torch.all(cmp.quantize_round(cmp.scale(t, torch.full((3,), 0.1))) == 0)


def test_scaling_factor_count_and_select():
    sf = cmp.ScalingFactors(5, 256, 192)
    assert sf.n_scalars == 4480
    a, a_p, b, b_p = sf.select(3)
    assert a.shape == (256,) and b_p.shape == (192,)
    assert torch.all(a > 0)
    a, *_ = sf.select(torch.tensor([1, 5]))
    assert a.shape == (2, 256)
    with pytest.raises(IndexError):
        sf.select(6)


def test_analysis_shapes():
    c = comp()
    z = c.analyze(torch.rand(1, 3, 32, 32), 2.0)
    assert z.shape == (1, 256, 8, 8)
    v = c.hyper_analyze(z, 2.0)
    assert v.shape == (1, 192, 2, 2)
    mu, sigma = c.hyper_synthesize(v, 2.0)
    assert mu.shape == z.shape == sigma.shape
    assert torch.all(sigma >= 1e-6) and torch.isfinite(mu).all()
    c2 = comp(c_z=16, c_v=12)
    z = c2.analyze(torch.rand(1, 3, 128, 128), 2.0)
    assert z.shape == (1, 16, 32, 32)
    assert c2.hyper_analyze(z, 2.0).shape == (1, 12, 8, 8)
    with pytest.raises(ShapeError):
        c2.analyze(torch.rand(1, 3, 24, 24), 2.0)


def test_sa_conditioning_changes_latents():
    c = comp(c_z=16, c_v=12)
    s = torch.rand(1, 3, 32, 32)
    assert not torch.equal(c.analyze(s, 10 ** 0.1), c.analyze(s, 10 ** 0.9))


def test_forward_shapes_and_finite():
    c = comp(c_z=16, c_v=12, n_rates=2)
    s = torch.rand(2, 3, 32, 32)
    for mode in ("noise", "round"):
        out = c(s, 2.0, 2, mode=mode)
        assert out["s_hat"].shape == s.shape
        assert torch.isfinite(out["s_hat"]).all()
    with pytest.raises(ValueError):
        c(s, 2.0, 1, mode="bogus")


def test_quantize_ste_rounds_forward_passes_gradient():
    t = torch.tensor([-1.6, -0.4, 0.5, 2.49], requires_grad=True)
    q = cmp.quantize_ste(t)
    assert torch.equal(q.detach(), torch.round(t.detach()))
    q.sum().backward()
    assert torch.equal(t.grad, torch.ones(4))


def test_mixed_mode_decodes_rounded_latents_and_rates_noisy_ones():
    c = comp(c_z=16, c_v=12)
    s = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        mixed = c(s, 2.0, mode="mixed", generator=torch.Generator().manual_seed(3))
        rounded = c(s, 2.0, mode="round")
    assert torch.equal(mixed["s_hat"], rounded["s_hat"])
    assert torch.equal(mixed["mu"], rounded["mu"])
    # the rate terms see noisy latents, so they differ from the rounded ones
    assert not torch.equal(mixed["lik_z"], rounded["lik_z"])
    out = c(s, 2.0, mode="mixed")
    torch.mean((out["s_hat"] - s) ** 2).backward()
    assert c.g_a[0].weight.grad.abs().sum() > 0


def test_gaussian_likelihood_examples():
    z = torch.tensor([0.0], dtype=torch.float64)
    p = cmp.likelihood_gaussian(z, z, torch.tensor([1.0], dtype=torch.float64))
    assert abs(float(p) - 0.38292) < 1e-5
    assert abs(float(p) - (norm.cdf(0.5) - norm.cdf(-0.5))) < 1e-12
    sigma = torch.tensor([1e3], dtype=torch.float64)
    p = cmp.likelihood_gaussian(z, z, sigma)
    assert abs(float(p) * 1e3 * math.sqrt(2 * math.pi) - 1) < 1e-6


def test_gaussian_likelihood_far_tail_against_scipy():
    z = torch.tensor([12.0, -9.0], dtype=torch.float64)
    mu = torch.zeros(2, dtype=torch.float64)
    sig = torch.tensor([2.0, 1.5], dtype=torch.float64)
    p = cmp.likelihood_gaussian(z, mu, sig, floor=False).numpy()
    ref = norm.sf((np.abs(z.numpy()) - 0.5) / sig.numpy()) - norm.sf((np.abs(z.numpy()) + 0.5) / sig.numpy())
    assert np.allclose(p, ref, rtol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(-20, 20), st.floats(0.05, 30))
def test_gaussian_likelihood_normalized(mu, sigma):
    z = torch.arange(-400, 401, dtype=torch.float64)
    p = cmp.likelihood_gaussian(z, torch.full_like(z, mu), torch.full_like(z, sigma), floor=False)
    assert abs(float(p.sum()) - 1) < 1e-4


def test_factorized_prior_properties():
    prior = cmp.FactorizedPrior(4)
    v = torch.arange(-300, 301, dtype=torch.float32).reshape(1, 1, 1, -1).expand(1, 4, 1, -1)
    p = prior.likelihood(v.contiguous(), floor=False)
    assert torch.all(p >= 0)
    assert torch.allclose(p.sum(dim=-1), torch.ones(1, 4, 1), atol=1e-4)
    x = torch.linspace(-20, 20, 200).reshape(1, 1, -1).expand(4, 1, -1)
    cdf = prior.cdf(x)
    assert torch.all(prior.cdf(x + 1) >= cdf)


def test_factorized_prior_initial_logistic():
    prior = cmp.FactorizedPrior(3)
    # at init the factors are zero, so the CDF is a logistic in an affine map of x
    with torch.no_grad():
        scale = 1.0
        bias = 0.0
        for m, b in zip(prior.matrices, prior.biases):
            w = torch.nn.functional.softplus(m)
            scale = w.sum(dim=2) * 1.0 if isinstance(scale, float) else torch.matmul(w, scale.unsqueeze(-1)).squeeze(-1)
            bias = b.squeeze(-1) if isinstance(bias, float) else torch.matmul(w, bias.unsqueeze(-1)).squeeze(-1) + b.squeeze(-1)
        s, b0 = scale.squeeze(-1), bias.squeeze(-1)
        expected = torch.sigmoid(0.5 * s + b0) - torch.sigmoid(-0.5 * s + b0)
        p = prior.likelihood(torch.zeros(1, 3, 1, 1), floor=False).flatten()
    assert torch.allclose(p, expected, atol=1e-6)


def test_pmf_table_rows_sum_to_one():
    prior = cmp.FactorizedPrior(5)
    t = prior.pmf_table()
    assert t.shape == (5, 256)
    assert np.allclose(t.sum(axis=1), 1.0, atol=1e-6)


def test_estimate_bpp_examples():
    lik = torch.full((1, 4, 16, 16), 0.5)
    assert float(cmp.estimate_bpp(lik, torch.ones(1, 1, 1, 1), 32, 32)) == 1.0
    assert float(cmp.estimate_bpp(torch.ones(1, 4, 2, 2), torch.ones(1, 1, 1, 1), 32, 32)) == 0.0
    g = torch.Generator().manual_seed(0)
    lz = torch.rand(3, 5, 4, 4, generator=g, dtype=torch.float64) * 0.99 + 0.01
    lv = torch.rand(3, 2, 1, 1, generator=g, dtype=torch.float64) * 0.99 + 0.01
    ref = sum(-math.log2(x) for x in lz.flatten().tolist()) + sum(-math.log2(x) for x in lv.flatten().tolist())
    ref /= 3 * 16 * 16
    assert abs(float(cmp.estimate_bpp(lz, lv, 16, 16)) - ref) / ref < 1e-9


def test_gaussian_coding_roundtrip_with_escapes():
    rng = np.random.default_rng(0)
    mu = rng.normal(0, 3, size=(4, 3, 3))
    sigma = rng.uniform(0.1, 5, size=(4, 3, 3))
    vals = np.round(mu + sigma * rng.normal(size=mu.shape))
    vals[0, 0, 0] = 1000  # outside the coding support
    vals[1, 2, 2] = -4000
    data = cmp.encode_gaussian(vals, mu, sigma)
    assert np.array_equal(cmp.decode_gaussian(data, mu, sigma).reshape(vals.shape), vals)


def test_factorized_coding_roundtrip():
    prior = cmp.FactorizedPrior(6)
    tables = prior.cdf_tables()
    rng = np.random.default_rng(1)
    vals = rng.integers(-3, 4, size=(6, 2, 2)).astype(np.float64)
    vals[2, 1, 1] = 500
    data = cmp.encode_factorized(vals, tables)
    assert np.array_equal(cmp.decode_factorized(data, tables, vals.shape), vals)


def test_scaling_up_never_shortens_code():
    torch.manual_seed(0)
    c = comp(c_z=16, c_v=12)
    s = torch.rand(4, 3, 32, 32)
    with torch.no_grad():
        base = c(s, 2.0, 1, mode="round")
        bits1 = float(cmp.bits_per_item(base["lik_z"]).sum())
        c.scaling.log_a += math.log(2.0)
        bits2 = float(cmp.bits_per_item(c(s, 2.0, 1, mode="round")["lik_z"]).sum())
    assert bits2 >= bits1
