"""Analog DeepJSCC encoder ``f_s`` and decoder ``g_d``.

The encoder maps an image to a power-normalized complex codeword of
``k = c_out * (H/4) * (W/4) / 2`` channel uses. Each backbone stage ends with
an SNR gate and, for rate-adaptive models, a rate gate right after it.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .channels import normalize_power
from .errors import ShapeError
from .layers import CondSequential, RateGate, ResidualBlock, SNRGate, Upsample, conv

DIVISOR = 16


@dataclass
class JSCCConfig:
    c_out: int = 24
    features: int = 256
    n_res_blocks: int = 4
    n_rates: int = 1
    rate_adaptive: bool = False
    snr_adaptive: bool = True
    snr_range_db: tuple = (1.0, 9.0)
    in_channels: int = 3

    def channel_uses(self, height: int, width: int) -> int:
        return self.c_out * (height // 4) * (width // 4) // 2


def _gates(cfg: JSCCConfig, f: int):
    gates = [SNRGate(f, cfg.snr_range_db)] if cfg.snr_adaptive else []
    if cfg.rate_adaptive:
        gates.append(RateGate(f, cfg.n_rates))
    return gates


def check_image_shape(height: int, width: int):
    if height % DIVISOR or width % DIVISOR:
        raise ShapeError(f"image size {height}x{width} must be divisible by {DIVISOR}")


def to_complex(t: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) real features -> (B, k) complex; first half real part."""
    flat = t.flatten(1)
    if flat.shape[1] % 2:
        raise ShapeError("feature count must be even to form complex symbols")
    re, im = flat.chunk(2, dim=1)
    return torch.complex(re, im)


def to_real(x: torch.Tensor, shape) -> torch.Tensor:
    """Inverse of :func:`to_complex` for features of shape (C, H, W)."""
    flat = torch.cat([x.real, x.imag], dim=1)
    return flat.reshape(x.shape[0], *shape)


class JSCCEncoder(nn.Module):
    def __init__(self, cfg: JSCCConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.features
        layers = []
        cin = cfg.in_channels
        for stride in (2, 2, 1):
            if stride == 2:
                layers += [conv(cin, f, 5, stride=2), nn.PReLU(f)]
            layers += [ResidualBlock(f) for _ in range(cfg.n_res_blocks)]
            layers += _gates(cfg, f)
            cin = f
        layers += [conv(f, cfg.c_out, 3)]
        self.body = CondSequential(layers)

    def forward(self, s, eta, ell=1):
        if s.dim() != 4:
            raise ShapeError("expected a (B, C, H, W) image batch")
        check_image_shape(s.shape[-2], s.shape[-1])
        return normalize_power(to_complex(self.body(s, eta, ell)))


class JSCCDecoder(nn.Module):
    def __init__(self, cfg: JSCCConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.features
        layers = [conv(cfg.c_out, f, 3), nn.PReLU(f)]
        for up in (False, True, True):
            layers += [ResidualBlock(f) for _ in range(cfg.n_res_blocks)]
            layers += _gates(cfg, f)
            if up:
                layers += [Upsample(f, f), nn.PReLU(f)]
        layers += [conv(f, cfg.in_channels, 3)]
        self.body = CondSequential(layers)

    def forward(self, x_hat, eta, ell=1, image_size=(32, 32)):
        h, w = image_size
        check_image_shape(h, w)
        k = self.cfg.channel_uses(h, w)
        if x_hat.dim() != 2 or x_hat.shape[1] != k:
            raise ShapeError(f"expected {k} channel uses for a {h}x{w} image, got {tuple(x_hat.shape)}")
        feats = to_real(x_hat, (self.cfg.c_out, h // 4, w // 4))
        return torch.sigmoid(self.body(feats, eta, ell))


def sa_modulate(gate: SNRGate, z, eta):
    return gate(z, eta)


def ra_modulate(gate: RateGate, z, ell):
    return gate(z, ell)
