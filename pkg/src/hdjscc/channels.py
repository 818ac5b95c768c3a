"""Complex-baseband channel simulation for the wireless access hop.

All signals are complex torch tensors whose last dimension indexes channel
uses; leading dimensions are batch dimensions and per-item parameters
(SNR, fading coefficient) broadcast over them. SNR is linear everywhere in
this module; use :func:`db_to_linear` at the interface boundary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateSignalError, SingularFadingError

CHANNEL_KINDS = ("awgn", "rayleigh_csit", "rayleigh_csir")


def db_to_linear(db):
    if isinstance(db, torch.Tensor):
        return torch.pow(10.0, db / 10.0)
    out = np.power(10.0, np.asarray(db, dtype=np.float64) / 10.0)
    return float(out) if out.ndim == 0 else out


def linear_to_db(eta):
    if isinstance(eta, torch.Tensor):
        return 10.0 * torch.log10(eta)
    out = 10.0 * np.log10(np.asarray(eta, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


def derive_seed(seed: int, *counters: int) -> int:
    """Derive a 63-bit seed from a base seed and a tuple of counters.

    Used as ``derive_seed(seed, epoch, batch, item)`` so that a given sample
    sees the same randomness regardless of loader worker count.
    """
    ss = np.random.SeedSequence([int(seed), *[int(c) for c in counters]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def make_generator(seed: int, *counters: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *counters))
    return g


@dataclass(frozen=True)
class ChannelState:
    """Per-transmission channel description.

    ``eta`` is the linear SNR (1/noise variance), ``h`` the complex block
    fading coefficient, ``csit`` whether the transmitter knows ``h`` and
    ``ell`` the 1-based rate index.
    """

    eta: float
    h: complex = 1.0 + 0.0j
    csit: bool = False
    ell: int = 1

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.ell < 1:
            raise IndexError(f"rate index must be >= 1, got {self.ell}")

    @classmethod
    def awgn(cls, eta: float, ell: int = 1) -> "ChannelState":
        return cls(eta=eta, h=1.0 + 0.0j, csit=False, ell=ell)

    @property
    def effective_eta(self) -> float:
        return abs(self.h) ** 2 * self.eta


def _per_item(value, ref: torch.Tensor, dtype=None) -> torch.Tensor:
    """Broadcast a scalar or per-item tensor against ``ref[..., k]``."""
    t = torch.as_tensor(value, dtype=dtype, device=ref.device)
    if t.dim() == 0:
        return t
    return t.reshape(t.shape + (1,) * (ref.dim() - t.dim()))


def normalize_power(x: torch.Tensor) -> torch.Tensor:
    """Scale each signal by ``min(1, sqrt(k)/||x||)`` along the last axis.

    Signals already within the unit average-power budget pass through
    unchanged; the direction of every signal is preserved.
    """
    if x.shape[-1] == 0:
        raise DegenerateSignalError("empty signal")
    k = x.shape[-1]
    norm = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if bool((norm == 0).any()):
        raise DegenerateSignalError("cannot normalize an all-zero signal")
    scale = torch.clamp(math.sqrt(k) / norm, max=1.0)
    return x * scale


def average_power(x: torch.Tensor) -> torch.Tensor:
    return (x.real**2 + x.imag**2).mean(dim=-1)


def complex_noise(shape, variance, generator=None, dtype=torch.complex64, device=None) -> torch.Tensor:
    """Circularly-symmetric complex Gaussian noise with per-sample ``variance``."""
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    w = torch.randn(*shape, 2, generator=generator, dtype=real_dtype, device=device)
    w = torch.view_as_complex(w)
    return w * torch.sqrt(torch.as_tensor(variance, dtype=real_dtype) / 2.0)


def awgn(x: torch.Tensor, eta, generator: torch.Generator | None = None) -> torch.Tensor:
    """Add CN(0, 1/eta) noise; ``eta`` may be a scalar or one value per item.

    ``eta = inf`` yields a noiseless channel.
    """
    eta_t = _per_item(eta, x, dtype=torch.float64)
    if bool((eta_t <= 0).any()):
        raise ValueError("eta must be positive")
    var = (1.0 / eta_t).to(x.real.dtype)
    w = complex_noise(x.shape, 1.0, generator=generator, dtype=x.dtype, device=x.device)
    return x + w * torch.sqrt(var)


def sample_rayleigh(generator: torch.Generator | None = None, size=(), dtype=torch.complex64) -> torch.Tensor:
    """Draw h ~ CN(0, 1) (one coefficient per image under block fading)."""
    return complex_noise(tuple(size), 1.0, generator=generator, dtype=dtype)


def precode_csit(x: torch.Tensor, h) -> torch.Tensor:
    """Rotate by the conjugate channel phase, ``(h*/|h|) x``."""
    h_t = _per_item(h, x, dtype=x.dtype)
    mag = h_t.abs()
    if bool((mag == 0).any()):
        raise SingularFadingError("cannot precode for h = 0")
    return x * (h_t.conj() / mag)


def mmse_equalize(y: torch.Tensor, h, eta, csit: bool) -> torch.Tensor:
    """MMSE estimate of the transmitted signal.

    With CSIT the precoded channel is the real gain ``|h|`` and the estimate
    is ``|h| y / (|h|^2 + 1/eta)``; otherwise ``h* y / (|h|^2 + 1/eta)``.
    """
    h_t = _per_item(h, y, dtype=y.dtype)
    eta_t = _per_item(eta, y, dtype=torch.float64).to(y.real.dtype)
    if bool((eta_t <= 0).any()):
        raise ValueError("eta must be positive")
    denom = h_t.abs() ** 2 + 1.0 / eta_t
    gain = h_t.abs() if csit else h_t.conj()
    return gain * y / denom


def transmit(
    x: torch.Tensor,
    eta,
    kind: str = "awgn",
    h=None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Pass a (normalized, already precoded when CSIT) signal through one hop
    and equalize at the receiver. Returns the equalized estimate.
    """
    if kind == "awgn":
        return awgn(x, eta, generator)
    if kind not in CHANNEL_KINDS:
        raise ValueError(f"unknown channel kind {kind!r}")
    if h is None:
        raise ValueError("fading channels need h")
    h_t = _per_item(h, x, dtype=x.dtype)
    y = awgn(h_t * x, eta, generator)
    return mmse_equalize(y, h, eta, csit=(kind == "rayleigh_csit"))
