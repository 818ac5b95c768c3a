"""Comparison systems.

* Naive relaying: Lloyd vector quantization of the received signal, with the
  JSCC decoder applied to the quantized signal at the destination.
* Fully digital chain: a source codec followed by an idealized coded
  modulation whose block error rate is 0 at or above its SNR threshold and 1
  below it, which reproduces the cliff effect. Failed blocks are
  reconstructed as the dataset-mean image.
"""
from __future__ import annotations

import math
import shlex
import subprocess
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import yaml

from .errors import ConfigurationError, ShapeError

# --- Lloyd vector quantization ----------------------------------------------------


@dataclass
class VQCodebook:
    centroids: np.ndarray
    n_v: int
    bits: float
    distortions: list = field(default_factory=list)
    degenerate: bool = False

    @property
    def size(self) -> int:
        return len(self.centroids)


def codebook_size(n_v: int, bits: float) -> int:
    total = n_v * bits
    if abs(total - round(total)) > 1e-9 or total < 1:
        raise ConfigurationError(f"N_v * b = {total} must be a positive integer")
    return 1 << int(round(total))


def _assign(x: np.ndarray, centroids: np.ndarray, chunk: int = 1 << 16):
    idx = np.empty(len(x), dtype=np.int64)
    d2 = np.empty(len(x))
    cc = (centroids ** 2).sum(axis=1)
    for i in range(0, len(x), chunk):
        xb = x[i:i + chunk]
        dist = (xb ** 2).sum(axis=1)[:, None] - 2.0 * xb @ centroids.T + cc[None, :]
        j = dist.argmin(axis=1)
        idx[i:i + chunk] = j
        d2[i:i + chunk] = ((xb - centroids[j]) ** 2).sum(axis=1)
    return idx, d2


def lloyd_train(samples, n_v: int, bits: float, max_iters: int = 200, tol: float = 1e-7,
                seed: int = 0) -> VQCodebook:
    """Train a ``2**(n_v*bits)``-entry codebook on ``n_v``-dimensional samples.

    Alternates nearest-centroid assignment and centroid means until the
    relative distortion drop falls below ``tol``. Empty clusters are re-seeded
    at the sample farthest from its centroid. ``distortions`` holds the mean
    squared error per element of every assignment step and never increases.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1, n_v)
    k = codebook_size(n_v, bits)
    if len(x) < 10 * k:
        raise ValueError(f"need at least {10 * k} samples for {k} centroids, got {len(x)}")
    if np.all(x == x[0]):
        return VQCodebook(np.repeat(x[:1], k, axis=0), n_v, bits, [0.0], degenerate=True)
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(len(x), size=k, replace=False)].copy()
    idx, d2 = _assign(x, centroids)
    dist = [float(d2.mean()) / n_v]
    for _ in range(max_iters):
        counts = np.bincount(idx, minlength=k)
        sums = np.zeros_like(centroids)
        np.add.at(sums, idx, x)
        new = centroids.copy()
        nz = counts > 0
        new[nz] = sums[nz] / counts[nz, None]
        empty = np.flatnonzero(~nz)
        if len(empty):
            far = np.argsort(-d2, kind="stable")[:len(empty)]
            new[empty] = x[far]
        new_idx, new_d2 = _assign(x, new)
        d = float(new_d2.mean()) / n_v
        if d > dist[-1]:
            break  # only floating-point noise can get here; keep the better codebook
        centroids, idx, d2 = new, new_idx, new_d2
        drop = (dist[-1] - d) / dist[-1] if dist[-1] > 0 else 0.0
        dist.append(d)
        if drop < tol:
            break
    return VQCodebook(centroids, n_v, bits, dist)


def complex_real_view(y: torch.Tensor | np.ndarray) -> np.ndarray:
    """(B, k) complex -> (B, 2k) real, real parts first then imaginary parts."""
    y = y.detach().cpu().numpy() if isinstance(y, torch.Tensor) else np.asarray(y)
    y = np.atleast_2d(y)
    return np.concatenate([y.real, y.imag], axis=-1).astype(np.float64)


@dataclass
class VQResult:
    indices: np.ndarray
    bits: np.ndarray
    y_hat: torch.Tensor
    bpp: float


def vq_forward(y1, codebook: VQCodebook, image_hw=(32, 32)) -> VQResult:
    """Quantize the real view of ``y1`` block by block.

    Every block index is sent with ``n_v * b`` bits, so ``2 k b`` bits per
    signal in total.
    """
    real = complex_real_view(y1)
    b, two_k = real.shape
    if two_k % codebook.n_v:
        raise ShapeError(f"2k = {two_k} is not a multiple of N_v = {codebook.n_v}")
    blocks = real.reshape(-1, codebook.n_v)
    idx, _ = _assign(blocks, codebook.centroids)
    width = int(round(codebook.n_v * codebook.bits))
    bits = ((idx[:, None] >> np.arange(width - 1, -1, -1)) & 1).astype(np.uint8).ravel()
    q = codebook.centroids[idx].reshape(b, two_k)
    k = two_k // 2
    dtype = y1.dtype if isinstance(y1, torch.Tensor) else torch.complex64
    y_hat = torch.complex(torch.from_numpy(q[:, :k]), torch.from_numpy(q[:, k:])).to(dtype)
    bpp = len(bits) / b / (image_hw[0] * image_hw[1])
    return VQResult(idx.reshape(b, -1), bits, y_hat, bpp)


# --- idealized digital chain -----------------------------------------------------


@dataclass(frozen=True)
class CodedModulationEntry:
    code_rate: float
    modulation_order: int
    min_snr_db: float
    name: str = ""

    def __post_init__(self):
        if self.spectral_efficiency <= 0:
            raise ConfigurationError("spectral efficiency must be positive")

    @property
    def spectral_efficiency(self) -> float:
        return self.code_rate * self.modulation_order


def capacity(eta_db: float) -> float:
    """AWGN capacity in bits per complex channel use."""
    return math.log2(1.0 + 10.0 ** (eta_db / 10.0))


def capacity_budget(eta_db: float, k: int) -> float:
    return k * capacity(eta_db)


def load_mcs_table(path=None) -> list[CodedModulationEntry]:
    """Read entries (``rate``, ``order``, ``min_snr_db``, optional ``name``)
    from YAML; the bundled default table when ``path`` is None.
    """
    if path is None:
        text = resources.files("hdjscc").joinpath("mcs_default.yaml").read_text()
    else:
        text = Path(path).read_text()
    raw = yaml.safe_load(text)
    entries = raw["entries"] if isinstance(raw, dict) else raw
    out = []
    for e in entries:
        rate = e["rate"]
        if isinstance(rate, str):
            num, den = rate.split("/")
            rate = int(num) / int(den)
        out.append(CodedModulationEntry(float(rate), int(e["order"]), float(e["min_snr_db"]), e.get("name", "")))
    if not out:
        raise ConfigurationError("MCS table is empty")
    return sorted(out, key=lambda m: m.spectral_efficiency)


def select_mcs(table: Sequence[CodedModulationEntry], design_snr_db: float):
    """Highest spectral efficiency whose threshold is met, or None."""
    ok = [m for m in table if m.min_snr_db <= design_snr_db]
    return max(ok, key=lambda m: (m.spectral_efficiency, -m.min_snr_db)) if ok else None


class SourceCodec(Protocol):
    qualities: Sequence

    def encode(self, image: np.ndarray, quality) -> bytes: ...

    def decode(self, data: bytes) -> np.ndarray: ...


def fit_to_budget(codec: SourceCodec, image: np.ndarray, budget_bits: float):
    """Best quality whose output fits in ``budget_bits``; ``(data, quality)``
    or ``(None, None)`` when even the lowest quality is too large.
    """
    for q in sorted(codec.qualities, reverse=True):
        data = codec.encode(image, q)
        if 8 * len(data) <= budget_bits:
            return data, q
    return None, None


def _to_ppm(image: np.ndarray) -> bytes:
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image, dtype=np.uint8).tobytes()


def _from_ppm(data: bytes) -> np.ndarray:
    from PIL import Image
    import io

    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))


class SubprocessCodec:
    """External still-image codec driven through pipes.

    ``encode_cmd`` receives a binary PPM on stdin and must write the
    compressed bytes to stdout; ``{quality}`` in the command is replaced by
    the quality value. ``decode_cmd`` receives those bytes on stdin and must
    write a PPM (or any format Pillow reads) to stdout.
    """

    def __init__(self, encode_cmd: str, decode_cmd: str, qualities: Sequence, timeout: float = 60.0):
        self.encode_cmd = encode_cmd
        self.decode_cmd = decode_cmd
        self.qualities = list(qualities)
        self.timeout = timeout

    def _run(self, cmd: str, data: bytes) -> bytes:
        res = subprocess.run(shlex.split(cmd), input=data, capture_output=True, timeout=self.timeout)
        if res.returncode != 0:
            raise RuntimeError(f"codec command failed ({res.returncode}): {res.stderr.decode(errors='replace')}")
        return res.stdout

    def encode(self, image: np.ndarray, quality) -> bytes:
        return self._run(self.encode_cmd.format(quality=quality), _to_ppm(image))

    def decode(self, data: bytes) -> np.ndarray:
        return _from_ppm(self._run(self.decode_cmd, data))


class LearnedCodec:
    """The relay compressor used as a plain image codec.

    Qualities are rate indices of the model's scaling factors; the SNR
    conditioning is pinned to ``eta_db``.
    """

    def __init__(self, model, eta_db: float | None = None):
        self.model = model
        self.eta_db = model.cfg.eta_max_db if eta_db is None else eta_db
        self.qualities = list(range(1, model.cfg.n_rates + 1))

    def encode(self, image: np.ndarray, quality) -> bytes:
        from .data import to_tensor
        from .pipeline import relay_compress

        s = to_tensor(image[None])
        bs, _, _ = relay_compress(self.model, s, self.eta_db, int(quality))
        return bs.to_bytes()

    def decode(self, data: bytes) -> np.ndarray:
        from .pipeline import decompress

        s_hat = decompress(self.model, data)[0]
        return np.round(s_hat.numpy().transpose(1, 2, 0) * 255.0).astype(np.uint8)


@dataclass
class DigitalResult:
    bpp: float
    psnr: float
    ssim: float
    eta_db: float
    design_snr_db: float
    entry: CodedModulationEntry | None
    budget_bits: float
    success_rate: float


def digital_baseline(images: np.ndarray, eta_db: float, mcs_table, source_codec: SourceCodec, k: int,
                     mean_image: np.ndarray, design_snr_db: float | None = None) -> DigitalResult:
    """Idealized separate source/channel coding over one block per image.

    The coded modulation is picked for ``design_snr_db`` (the true SNR when
    None). Blocks succeed iff the true SNR reaches the entry's threshold;
    failures and outages (no feasible entry or nothing fits the budget)
    deliver ``mean_image``. PSNR/SSIM are averaged over all images.
    """
    from .data import to_tensor
    from .metrics import psnr_per_image, ssim_per_image

    design = eta_db if design_snr_db is None else design_snr_db
    entry = select_mcs(mcs_table, design)
    budget = 0.0 if entry is None else math.floor(k * entry.spectral_efficiency)
    link_ok = entry is not None and eta_db >= entry.min_snr_db
    recon, used_bits, ok = [], [], 0
    for img in images:
        data = None
        if entry is not None:
            data, _ = fit_to_budget(source_codec, img, budget)
        if data is not None and link_ok:
            recon.append(source_codec.decode(data))
            ok += 1
        else:
            recon.append(mean_image)
        used_bits.append(0 if data is None else 8 * len(data))
    s, s_hat = to_tensor(np.asarray(images)), to_tensor(np.stack(recon))
    h, w = images.shape[1:3]
    return DigitalResult(float(np.mean(used_bits)) / (h * w), float(np.mean(psnr_per_image(s, s_hat))),
                         float(np.mean(ssim_per_image(s, s_hat))), eta_db, design, entry, budget,
                         ok / len(images))


def mean_image_uint8(images: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(images, dtype=np.float64).mean(axis=0)).astype(np.uint8)


# --- naive relaying baseline --------------------------------------------------------

@torch.no_grad()
def received_signals(model, images, eta_db: float, seed: int = 0, batch_size: int = 200):
    from .channels import db_to_linear
    from .data import iterate_batches

    gen = torch.Generator().manual_seed(seed)
    eta = db_to_linear(eta_db)
    ys = [model.access_hop(s, eta, 1, None, gen, "awgn")[1]
          for s in iterate_batches(images, batch_size, None, drop_last=False)]
    return torch.cat(ys)


@torch.no_grad()
def naive_vq_baseline(model, train_images, test_images, eta_db: float, n_v: int = 2, bits: float = 1,
                      seed: int = 0, max_train_blocks: int = 1_000_000):
    """Train a Lloyd codebook on received signals, then decode quantized
    test signals with the JSCC decoder. Returns ``(psnr, bpp, codebook)``.
    """
    from .channels import db_to_linear
    from .metrics import psnr_per_image
    from .data import to_tensor

    y_train = complex_real_view(received_signals(model, train_images, eta_db, seed)).reshape(-1, n_v)
    if len(y_train) > max_train_blocks:
        y_train = y_train[np.random.default_rng(seed).choice(len(y_train), max_train_blocks, replace=False)]
    cb = lloyd_train(y_train, n_v, bits, seed=seed)
    eta = db_to_linear(eta_db)
    ps, bpps = [], []
    for i in range(0, len(test_images), 200):
        imgs = test_images[i:i + 200]
        y = received_signals(model, imgs, eta_db, seed + 1 + i)
        res = vq_forward(y, cb, model.image_size)
        s_hat = model.relay_decode(res.y_hat, eta, 1)
        ps.append(psnr_per_image(to_tensor(imgs), s_hat))
        bpps.append(res.bpp)
    return float(np.mean(np.concatenate(ps))), float(np.mean(bpps)), cb
