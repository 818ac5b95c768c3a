"""Image quality metrics, codeword-distribution diagnostics and resource
accounting (storage and compute).
"""
from __future__ import annotations

import csv
import io
import math
import time

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

N_BINS = 100
KL_FLOOR = 1e-12


def _check_pair(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def mse_255(s, s_hat) -> torch.Tensor:
    """Per-image MSE on the 0-255 scale for (C, H, W) or (B, C, H, W) inputs in [0, 1]."""
    s, s_hat = _as_tensor(s), _as_tensor(s_hat)
    _check_pair(s, s_hat)
    d = (s.double() - s_hat.double()) * 255.0
    if d.dim() <= 3:
        return (d ** 2).mean().reshape(1)
    return (d ** 2).flatten(1).mean(dim=1)


def psnr_from_mse(mse) -> float:
    return math.inf if mse == 0 else 10.0 * math.log10(255.0 ** 2 / mse)


def psnr(s, s_hat) -> float:
    """PSNR in dB of images in [0, 1]; ``inf`` for identical inputs.

    For a batch this is the mean of per-image values.
    """
    vals = [psnr_from_mse(float(m)) for m in mse_255(s, s_hat)]
    return float(np.mean(vals))


def psnr_per_image(s, s_hat) -> np.ndarray:
    return np.array([psnr_from_mse(float(m)) for m in mse_255(s, s_hat)])


def _gaussian_window(size=11, sigma=1.5, dtype=torch.float64):
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_per_image(s, s_hat, win_size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Windowed SSIM on the 0-255 scale, Gaussian window, valid positions only,
    averaged over windows and channels.
    """
    s, s_hat = _as_tensor(s), _as_tensor(s_hat)
    _check_pair(s, s_hat)
    if s.dim() == 3:
        s, s_hat = s[None], s_hat[None]
    if s.shape[-1] < win_size or s.shape[-2] < win_size:
        raise ShapeError(f"images must be at least {win_size}x{win_size}")
    x = s.double() * 255.0
    y = s_hat.double() * 255.0
    b, c, h, w = x.shape
    g = _gaussian_window(win_size, sigma)
    kh = g.reshape(1, 1, win_size, 1).expand(c, 1, win_size, 1)
    kw = g.reshape(1, 1, 1, win_size).expand(c, 1, 1, win_size)

    def blur(t):
        return F.conv2d(F.conv2d(t, kh, groups=c), kw, groups=c)

    c1 = (0.01 * 255) ** 2
    c2 = (0.03 * 255) ** 2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx ** 2
    vy = blur(y * y) - my ** 2
    cxy = blur(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return smap.flatten(1).mean(dim=1).numpy()


def ssim(s, s_hat) -> float:
    return float(np.mean(ssim_per_image(s, s_hat)))


# --- codeword distribution --------------------------------------------------

def _real_view(signals) -> np.ndarray:
    if isinstance(signals, torch.Tensor):
        if torch.is_complex(signals):
            signals = torch.cat([signals.real, signals.imag], dim=-1)
        signals = signals.detach().cpu().double().numpy()
    arr = np.asarray(signals)
    if np.iscomplexobj(arr):
        arr = np.concatenate([arr.real, arr.imag], axis=-1)
    return np.atleast_2d(arr.astype(np.float64))


def minmax_normalize(signals) -> np.ndarray:
    """Per-signal min-max scaling of the real view to [0, 1].

    A constant signal carries no shape information and maps to 0.5.
    """
    x = _real_view(signals)
    lo = x.min(axis=1, keepdims=True)
    span = x.max(axis=1, keepdims=True) - lo
    out = np.full_like(x, 0.5)
    ok = span[:, 0] > 0
    out[ok] = (x[ok] - lo[ok]) / span[ok]
    return out


def histogram_bins(values: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """1-based bin index with bin ``i`` covering ((i-1)/n, i/n]; the value 0
    joins bin 1.
    """
    return np.clip(np.ceil(values * n_bins), 1, n_bins).astype(np.int64)


def empirical_codeword_distribution(signals, n_bins: int = N_BINS) -> np.ndarray:
    """Histogram (masses summing to 1) of normalized codeword elements, pooled
    over all signals.
    """
    x = minmax_normalize(signals)
    if x.size == 0:
        raise ValueError("need at least one signal")
    counts = np.bincount(histogram_bins(x.ravel(), n_bins) - 1, minlength=n_bins)
    return counts / counts.sum()


def kl_divergence(p, q, floor: float = KL_FLOOR) -> float:
    """``sum p log2(p / q)`` in bits, with ``q`` floored where ``p > 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("histograms must have the same number of bins")
    m = p > 0
    return float(max(np.sum(p[m] * np.log2(p[m] / np.maximum(q[m], floor))), 0.0))


# --- storage ----------------------------------------------------------------

def _count(params) -> int:
    return int(sum(p.numel() for p in params))


def gate_parameters(module: nn.Module):
    from .layers import ChannelGate

    return [p for m in module.modules() if isinstance(m, ChannelGate) for p in m.parameters()]


def storage_report(model, bytes_per_param: int = 4) -> dict:
    """Parameter counts per component of an h-DJSCC model.

    ``backbone`` excludes SA/RA gates, which are reported under ``sa_ra``;
    ``scaling_factors`` counts the per-rate gains.
    """
    comp = model.compressor
    parts = {"f_s": model.f_s, "g_d": model.g_d, "g_a": comp.g_a, "h_a": comp.h_a,
             "g_s": comp.g_s, "h_s": comp.h_s, "prior": comp.prior}
    report = {}
    gates = 0
    for name, m in parts.items():
        g = _count(gate_parameters(m))
        gates += g
        report[f"params_{name}"] = _count(m.parameters()) - g
    report["params_sa_ra"] = gates
    report["params_scaling_factors"] = comp.scaling.n_scalars
    report["params_total"] = _count(model.parameters())
    report["bytes_total"] = report["params_total"] * bytes_per_param
    report["megabits_total"] = report["bytes_total"] * 8 / 1e6
    return report


def expected_scaling_scalars(n_lambdas: int, c_z: int, c_v: int) -> int:
    return 2 * n_lambdas * (c_z + c_v)


# --- compute ----------------------------------------------------------------

def count_macs(module: nn.Module, *inputs, **kwargs) -> dict:
    """Multiply-accumulates of conv and linear layers for one forward pass,
    returned per layer kind along with the conv layer count.
    """
    stats = {"conv_macs": 0, "linear_macs": 0, "conv_layers": 0}

    def conv_hook(m, inp, out):
        k = m.kernel_size[0] * m.kernel_size[1] * (m.in_channels // m.groups)
        stats["conv_macs"] += out[0].numel() * k
        stats["conv_layers"] += 1

    def lin_hook(m, inp, out):
        stats["linear_macs"] += out[0].numel() * m.in_features

    hooks = []
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(lin_hook))
    try:
        with torch.no_grad():
            module(*inputs, **kwargs)
    finally:
        for h in hooks:
            h.remove()
    return stats


def complexity_report(model, image_shape=(3, 32, 32), eta_db: float = 5.0, ell: int = 1,
                      repeats: int = 3) -> dict:
    """MACs and wall-clock seconds per image for each node role.

    Source runs ``f_s``; the relay runs ``g_d``, ``g_a`` and ``h_a`` (plus
    ``h_s`` for the coding tables); the destination runs ``h_s`` and ``g_s``.
    """
    from .channels import db_to_linear

    eta = db_to_linear(eta_db)
    c, h, w = image_shape
    s = torch.rand(1, c, h, w)
    comp = model.compressor
    with torch.no_grad():
        x = model.f_s(s, eta, ell)
        s_t = model.g_d(x, eta, ell, image_size=(h, w))
        z = comp.analyze(s_t, eta)
        v = comp.hyper_analyze(z, eta)

    stages = {
        "source": [(model.f_s, (s, eta, ell), {})],
        "relay": [(model.g_d, (x, eta, ell), {"image_size": (h, w)}), (comp.g_a, (s_t, eta), {}),
                  (comp.h_a, (z, eta), {}), (comp.h_s, (v, eta), {})],
        "destination": [(comp.h_s, (v, eta), {}), (comp.g_s, (z, eta), {})],
    }
    report = {}
    for role, calls in stages.items():
        macs = 0
        layers = 0
        for m, args, kw in calls:
            st = count_macs(m, *args, **kw)
            macs += st["conv_macs"] + st["linear_macs"]
            layers += st["conv_layers"]
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            with torch.no_grad():
                for m, args, kw in calls:
                    m(*args, **kw)
            best = min(best, time.perf_counter() - t0)
        report[f"{role}_macs"] = macs
        report[f"{role}_conv_layers"] = layers
        report[f"{role}_seconds"] = best
    return report


# --- emission ---------------------------------------------------------------

def format_kv(report: dict) -> str:
    return "\n".join(f"{k}: {v}" for k, v in report.items()) + "\n"


def format_csv(rows, fieldnames) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()
