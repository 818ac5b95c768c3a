"""Hyperprior neural compressor used at the first relay.

Latents ``z`` (main, /4 resolution) are modelled as discretized Gaussians
whose mean and scale come from the hyper-synthesis transform; hyper-latents
``v`` (/16 resolution) use a per-channel learned monotone CDF. Per-rate
channel-wise scaling factors steer a single compressor across several
rate-distortion operating points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import ndtr

from . import entropy_coding as ec
from .errors import CodingError, ShapeError
from .layers import CondSequential, ResidualBlock, SNRGate, Upsample, conv

SIGMA_MIN = 1e-6
P_MIN = 2.0**-16
SUPPORT = 127
TAIL_SIGMAS = 8.0
ESCAPE_BYTES = 2


def quantize_round(t: torch.Tensor) -> torch.Tensor:
    """Nearest integer, ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    return torch.sign(t) * torch.floor(torch.abs(t) + 0.5)


def quantize_noise(t: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """Additive U(-1/2, 1/2) noise, the training-time proxy for rounding."""
    u = torch.rand(t.shape, generator=generator, dtype=t.dtype, device=t.device)
    return t + (u - 0.5)


def quantize_ste(t: torch.Tensor) -> torch.Tensor:
    """Rounding in the forward pass, identity gradient in the backward pass."""
    return t + (torch.round(t) - t).detach()


def scale(t: torch.Tensor, factors: torch.Tensor) -> torch.Tensor:
    """Channel-wise product; ``factors`` is (C,) or per-item (B, C)."""
    if factors.dim() == 1:
        return t * factors[None, :, None, None]
    return t * factors[:, :, None, None]


rescale = scale


class ScalingFactors(nn.Module):
    """Positive gains ``a, a', b, b'`` per rate index, stored as logs.

    ``a``/``b`` scale ``z``/``v`` before quantization, ``a'``/``b'`` rescale
    the quantized tensors before synthesis.
    """

    def __init__(self, n_rates: int, c_z: int, c_v: int):
        super().__init__()
        self.n_rates = n_rates
        self.log_a = nn.Parameter(torch.zeros(n_rates, c_z))
        self.log_a_prime = nn.Parameter(torch.zeros(n_rates, c_z))
        self.log_b = nn.Parameter(torch.zeros(n_rates, c_v))
        self.log_b_prime = nn.Parameter(torch.zeros(n_rates, c_v))

    @property
    def n_scalars(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def select(self, ell):
        """Return ``(a, a', b, b')`` for a 1-based index (scalar or per item)."""
        ell = torch.as_tensor(ell, dtype=torch.long)
        if bool(((ell < 1) | (ell > self.n_rates)).any()):
            raise IndexError(f"rate index out of range [1, {self.n_rates}]")
        i = ell - 1
        return (
            torch.exp(self.log_a[i]),
            torch.exp(self.log_a_prime[i]),
            torch.exp(self.log_b[i]),
            torch.exp(self.log_b_prime[i]),
        )


def _std_normal_cdf(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * torch.erfc(-x / math.sqrt(2.0))


def likelihood_gaussian(z, mu, sigma, floor: bool = True) -> torch.Tensor:
    """Mass of N(mu, sigma^2) convolved with U(-1/2, 1/2), evaluated at ``z``."""
    sigma = torch.clamp(sigma, min=SIGMA_MIN)
    d = torch.abs(z - mu)
    # evaluated on the lower tail for accuracy far from the mean
    p = _std_normal_cdf((0.5 - d) / sigma) - _std_normal_cdf((-0.5 - d) / sigma)
    return torch.clamp(p, min=P_MIN) if floor else p


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF built from ``len(filters) + 1`` monotone stages.

    Each stage is an affine map with softplus-positive weights; all but the
    last add a ``tanh(factor) * tanh(.)`` term, which keeps the map monotone
    as long as the factor stays in (-1, 1). With factors at zero the whole
    CDF is a logistic, which is how it is initialized.
    """

    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        stage_scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / stage_scale / dims[i + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.empty(channels, dims[i + 1], 1).uniform_(-0.5, 0.5)))
            if i < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    @property
    def n_stages(self) -> int:
        return len(self.matrices)

    def logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        """``x`` has shape (C, 1, N); returns CDF logits of the same shape."""
        logits = x
        for i in range(self.n_stages):
            logits = torch.matmul(F.softplus(self.matrices[i]), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cdf(x))

    def likelihood(self, v: torch.Tensor, floor: bool = True) -> torch.Tensor:
        """Mass of the learned density convolved with U(-1/2, 1/2) at ``v`` (B, C, H, W)."""
        b, c, h, w = v.shape
        if c != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {c}")
        x = v.permute(1, 0, 2, 3).reshape(c, 1, -1)
        lower = self.logits_cdf(x - 0.5)
        upper = self.logits_cdf(x + 0.5)
        sign = -torch.sign(lower + upper).detach()
        sign = torch.where(sign == 0, torch.ones_like(sign), sign)
        p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        p = p.reshape(c, b, h, w).permute(1, 0, 2, 3)
        return torch.clamp(p, min=P_MIN) if floor else p

    @torch.no_grad()
    def pmf_table(self, support: int = SUPPORT) -> np.ndarray:
        """Probabilities of ``-support..support`` per channel plus the tail mass
        as a final escape column; shape (C, 2*support + 2).
        """
        grid = torch.arange(-support, support + 1, dtype=torch.float64)
        x = grid.reshape(1, 1, -1).expand(self.channels, 1, -1)
        x = x.to(self.matrices[0].dtype)
        lower = torch.sigmoid(self.logits_cdf(x - 0.5)).double()
        upper = torch.sigmoid(self.logits_cdf(x + 0.5)).double()
        pmf = torch.clamp(upper - lower, min=0.0).reshape(self.channels, -1).numpy()
        tail = np.clip(1.0 - pmf.sum(axis=1, keepdims=True), 0.0, None)
        return np.concatenate([pmf, tail], axis=1)

    def cdf_tables(self, support: int = SUPPORT) -> np.ndarray:
        """16-bit cumulative tables (C, 2*support + 3) for the hyper-latents."""
        return ec.quantize_pmf(self.pmf_table(support)).astype(np.int32)


@dataclass
class CompressorConfig:
    in_channels: int = 3
    out_channels: int = 3
    features: int = 192
    c_z: int = 256
    c_v: int = 192
    main_downsamples: int = 2
    hyper_downsamples: int = 2
    n_res_blocks: int = 1
    n_rates: int = 1
    snr_range_db: tuple = (1.0, 9.0)
    image_output: bool = True
    snr_adaptive: bool = True


class Compressor(nn.Module):
    """Analysis ``g_a``/``h_a`` and synthesis ``g_s``/``h_s`` transforms,
    SNR-conditioned through SA gates, plus the factorized prior and the
    per-rate scaling factors.
    """

    def __init__(self, cfg: CompressorConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.features
        rng = cfg.snr_range_db

        def sa(ch):
            return [SNRGate(ch, rng)] if cfg.snr_adaptive else []

        g_a = []
        cin = cfg.in_channels
        for i in range(2):
            g_a += [conv(cin, f, 5, stride=2 if i < cfg.main_downsamples else 1), nn.PReLU(f)]
            g_a += [ResidualBlock(f) for _ in range(cfg.n_res_blocks)]
            g_a += sa(f)
            cin = f
        g_a += [conv(f, cfg.c_z, 3)]
        self.g_a = CondSequential(g_a)

        self.h_a = CondSequential([
            conv(cfg.c_z, f, 3), nn.PReLU(f), *sa(f),
            conv(f, f, 5, stride=2 if cfg.hyper_downsamples > 0 else 1), nn.PReLU(f),
            conv(f, cfg.c_v, 5, stride=2 if cfg.hyper_downsamples > 1 else 1),
        ])

        h_s = []
        cin = cfg.c_v
        for i in range(2):
            h_s += [Upsample(cin, f) if i < cfg.hyper_downsamples else conv(cin, f, 3), nn.PReLU(f)]
            cin = f
        h_s += [*sa(f), conv(f, 2 * cfg.c_z, 3)]
        self.h_s = CondSequential(h_s)

        g_s = [conv(cfg.c_z, f, 3), nn.PReLU(f)]
        for i in range(2):
            g_s += [ResidualBlock(f) for _ in range(cfg.n_res_blocks)]
            g_s += sa(f)
            g_s += [Upsample(f, f) if i < cfg.main_downsamples else conv(f, f, 3), nn.PReLU(f)]
        g_s += [conv(f, cfg.out_channels, 3)]
        self.g_s = CondSequential(g_s)

        self.prior = FactorizedPrior(cfg.c_v)
        self.scaling = ScalingFactors(cfg.n_rates, cfg.c_z, cfg.c_v)

    @property
    def spatial_factor(self) -> int:
        return 2 ** (self.cfg.main_downsamples + self.cfg.hyper_downsamples)

    def _check(self, x):
        m = self.spatial_factor
        if x.dim() != 4 or x.shape[-2] % m or x.shape[-1] % m:
            raise ShapeError(f"input spatial size {tuple(x.shape[-2:])} must be divisible by {m}")

    def analyze(self, s_tilde, eta):
        self._check(s_tilde)
        return self.g_a(s_tilde, eta)

    def hyper_analyze(self, z, eta):
        return self.h_a(z, eta)

    def hyper_synthesize(self, v, eta):
        """Mean and scale of the conditional Gaussian for ``z``; the network
        predicts log-scale, floored at ``SIGMA_MIN`` after exponentiation.
        """
        params = self.h_s(v, eta)
        mu, log_sigma = params.chunk(2, dim=1)
        sigma = torch.clamp(torch.exp(torch.clamp(log_sigma, max=20.0)), min=SIGMA_MIN)
        return mu, sigma

    def synthesize(self, z, eta):
        out = self.g_s(z, eta)
        return torch.sigmoid(out) if self.cfg.image_output else out

    def forward(self, s_tilde, eta, ell=1, generator=None, mode: str = "noise"):
        """Compress and reconstruct. ``mode='noise'`` is the training proxy,
        ``mode='round'`` the deployment quantizer. ``mode='mixed'`` trains
        with the noise proxy in the likelihoods but feeds straight-through
        rounded latents to both synthesis transforms, so the decoders see
        exactly what they get at deployment.
        """
        a, a_p, b, b_p = self.scaling.select(ell)
        z = scale(self.analyze(s_tilde, eta), a)
        v = scale(self.hyper_analyze(z, eta), b)
        if mode == "noise":
            z_q = quantize_noise(z, generator)
            v_q = quantize_noise(v, generator)
        elif mode == "round":
            z_q = quantize_round(z)
            v_q = quantize_round(v)
        elif mode == "mixed":
            z_q = quantize_ste(z)
            v_q = quantize_ste(v)
        else:
            raise ValueError(f"unknown quantization mode {mode!r}")
        s_hat = self.synthesize(rescale(z_q, a_p), eta)
        mu, sigma = self.hyper_synthesize(rescale(v_q, b_p), eta)
        z_r, v_r = (quantize_noise(z, generator), quantize_noise(v, generator)) if mode == "mixed" else (z_q, v_q)
        return {
            "z": z_q,
            "v": v_q,
            "mu": mu,
            "sigma": sigma,
            "s_hat": s_hat,
            "lik_z": likelihood_gaussian(z_r, mu, sigma),
            "lik_v": self.prior.likelihood(v_r),
        }


def bits_per_item(likelihoods: torch.Tensor) -> torch.Tensor:
    return -torch.log2(likelihoods).flatten(1).sum(dim=1)


def estimate_bpp(lik_z: torch.Tensor, lik_v: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Mean bits per pixel over the batch: (bits(z) + bits(v)) / (H * W)."""
    bits = bits_per_item(lik_z) + bits_per_item(lik_v)
    return bits.mean() / (height * width)


# --- entropy coding of latents -------------------------------------------

def _gaussian_mass(s, mu, sigma):
    d = np.abs(s - mu)
    return ndtr((0.5 - d) / sigma) - ndtr((-0.5 - d) / sigma)


def gaussian_tables(mu: np.ndarray, sigma: np.ndarray):
    """Per-symbol windowed tables for discretized Gaussians.

    Each symbol gets the integer window ``round(mu) +/- (ceil(8 sigma) + 1)``
    clipped to the coding support, followed by an escape entry holding the
    remaining mass. Returns ``(cum, nsym, lo)``.
    """
    mu = np.asarray(mu, dtype=np.float64).ravel()
    sigma = np.maximum(np.asarray(sigma, dtype=np.float64).ravel(), SIGMA_MIN)
    half = np.minimum(np.ceil(TAIL_SIGMAS * sigma) + 1, SUPPORT).astype(np.int64)
    center = np.clip(np.sign(mu) * np.floor(np.abs(mu) + 0.5), -SUPPORT, SUPPORT).astype(np.int64)
    lo = np.maximum(center - half, -SUPPORT)
    hi = np.minimum(center + half, SUPPORT)
    nwin = hi - lo + 1
    width = int(nwin.max()) + 1
    grid = lo[:, None] + np.arange(width)[None, :]
    valid = np.arange(width)[None, :] < nwin[:, None]
    pmf = np.where(valid, _gaussian_mass(grid, mu[:, None], sigma[:, None]), 0.0)
    esc = np.clip(1.0 - pmf.sum(axis=1), 0.0, None)
    pmf[np.arange(len(mu)), nwin] = esc
    nsym = nwin + 1
    cum = ec.quantize_pmf(pmf, nsym)
    return cum, nsym, lo


def _escape_bytes(values: np.ndarray) -> np.ndarray:
    if np.any(values < -(1 << 15)) or np.any(values >= (1 << 15)):
        raise CodingError("escaped value does not fit in 16 bits")
    raw = (values.astype(np.int64) & 0xFFFF).astype(np.int64)
    return np.stack([raw >> 8, raw & 0xFF], axis=1).ravel()


def _unescape(raw: np.ndarray) -> np.ndarray:
    raw = raw.reshape(-1, 2)
    u = (raw[:, 0] << 8) | raw[:, 1]
    return np.where(u >= (1 << 15), u - (1 << 16), u)


def _with_uniform_row(cum: np.ndarray, nsym: np.ndarray):
    """Append a uniform 256-symbol row (used for escaped raw bytes)."""
    width = max(cum.shape[1], 257)
    out = np.full((len(cum) + 1, width), ec.TOTAL, dtype=np.int64)
    out[:-1, : cum.shape[1]] = cum
    out[-1, :257] = ec.uniform_cum(256)
    return out, np.concatenate([nsym, [256]]).astype(np.int64)


def _escape_split(values, lo, nsym):
    idx = values - lo
    esc = (idx < 0) | (idx >= nsym - 1)
    return np.where(esc, nsym - 1, idx), esc


def encode_gaussian(values, mu, sigma) -> bytes:
    """Arithmetic-code integer latents against their conditional Gaussians.

    Values outside a symbol's window are sent as the escape symbol followed,
    after all regular symbols, by two raw bytes each.
    """
    values = np.asarray(values, dtype=np.int64).ravel()
    cum, nsym, lo = gaussian_tables(mu, sigma)
    if len(values) != len(lo):
        raise ShapeError("latent and parameter sizes differ")
    idx, esc = _escape_split(values, lo, nsym)
    extra = _escape_bytes(values[esc])
    all_cum, all_nsym = _with_uniform_row(cum, nsym)
    n = len(values)
    indices = np.concatenate([idx, extra])
    rows = np.concatenate([np.arange(n), np.full(len(extra), n)])
    return np.packbits(ec.encode_indices(indices, rows, all_cum, all_nsym)).tobytes()


def decode_gaussian(data: bytes, mu, sigma) -> np.ndarray:
    cum, nsym, lo = gaussian_tables(mu, sigma)
    n = len(lo)
    all_cum, all_nsym = _with_uniform_row(cum, nsym)
    esc_index = np.concatenate([nsym - 1, [-1]])
    idx, extra = ec.decode_indices(data, np.arange(n), all_cum, all_nsym, esc_index, n, ESCAPE_BYTES)
    out = lo + idx
    out[idx == nsym - 1] = _unescape(extra)
    return out


def encode_factorized(values: np.ndarray, tables: np.ndarray) -> bytes:
    """Code hyper-latents of shape (C, H, W) with per-channel tables covering
    ``-SUPPORT..SUPPORT`` plus escape.
    """
    values = np.asarray(values, dtype=np.int64)
    c = values.shape[0]
    cum = np.asarray(tables, dtype=np.int64)
    nsym = np.full(c, cum.shape[1] - 1, dtype=np.int64)
    rows = np.repeat(np.arange(c), values[0].size)
    flat = values.reshape(-1)
    idx, esc = _escape_split(flat, -SUPPORT, nsym[rows])
    extra = _escape_bytes(flat[esc])
    all_cum, all_nsym = _with_uniform_row(cum, nsym)
    indices = np.concatenate([idx, extra])
    rows = np.concatenate([rows, np.full(len(extra), c)])
    return np.packbits(ec.encode_indices(indices, rows, all_cum, all_nsym)).tobytes()


def decode_factorized(data: bytes, tables: np.ndarray, shape) -> np.ndarray:
    c = shape[0]
    per = int(np.prod(shape[1:]))
    cum = np.asarray(tables, dtype=np.int64)
    nsym = np.full(c, cum.shape[1] - 1, dtype=np.int64)
    all_cum, all_nsym = _with_uniform_row(cum, nsym)
    esc_index = np.concatenate([nsym - 1, [-1]])
    idx, extra = ec.decode_indices(data, np.repeat(np.arange(c), per), all_cum, all_nsym,
                                   esc_index, c, ESCAPE_BYTES)
    out = idx - SUPPORT
    out[idx == nsym[0] - 1] = _unescape(extra)
    return out.reshape(shape)
