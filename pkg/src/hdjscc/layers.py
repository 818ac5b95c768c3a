"""Building blocks shared by the JSCC codec and the relay compressor."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .channels import linear_to_db


def conv(cin, cout, kernel_size=3, stride=1):
    return nn.Conv2d(cin, cout, kernel_size, stride=stride, padding=kernel_size // 2)


class Upsample(nn.Module):
    """Sub-pixel x2 upsampling."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv = conv(cin, cout * 4, 3)
        self.shuffle = nn.PixelShuffle(2)

    def forward(self, x):
        return self.shuffle(self.conv(x))


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = conv(channels, channels)
        self.act = nn.PReLU(channels)
        self.conv2 = conv(channels, channels)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(x)))


def apply_channel_weights(z: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """out[b, c] = w[b, c] * z[b, c] for z of shape (B, C, H, W)."""
    return z * w[:, :, None, None]


class ChannelGate(nn.Module):
    """Channel-wise feature modulation driven by a conditioning vector.

    The gate computes ``w = MLP([mean_hw(z), cond])`` with one hidden layer
    of width ``C/2`` and a sigmoid output, then scales each channel of ``z``.
    Subclasses turn their conditioning input into ``cond``.
    """

    def __init__(self, channels: int, cond_dim: int):
        super().__init__()
        hidden = max(channels // 2, 1)
        self.fc1 = nn.Linear(channels + cond_dim, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def weights(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        pooled = z.mean(dim=(2, 3))
        h = F.relu(self.fc1(torch.cat([pooled, cond.to(pooled.dtype)], dim=1)))
        return torch.sigmoid(self.fc2(h))

    def modulate(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return apply_channel_weights(z, self.weights(z, cond))


class SNRGate(ChannelGate):
    """SA module: conditions on the SNR, fed to the MLP in standardized dB.

    The dB value is clamped to the range the gate was built for, so a model
    trained on a single SNR keeps its trained conditioning when evaluated
    at a mismatched one.
    """

    def __init__(self, channels: int, snr_range_db=(1.0, 9.0)):
        super().__init__(channels, 1)
        lo, hi = snr_range_db
        self.lo, self.hi = float(lo), float(hi)
        self.mid = 0.5 * (lo + hi)
        self.half = max(0.5 * (hi - lo), 1.0)

    def condition(self, eta: torch.Tensor, batch: int) -> torch.Tensor:
        eta = torch.as_tensor(eta, dtype=torch.float64)
        if eta.dim() == 0:
            eta = eta.expand(batch)
        db = torch.clamp(linear_to_db(eta), self.lo, self.hi)
        return ((db - self.mid) / self.half).reshape(batch, 1)

    def forward(self, z, eta):
        return self.modulate(z, self.condition(eta, z.shape[0]).to(z.device))


class RateGate(ChannelGate):
    """RA module: conditions on a one-hot encoding of the 1-based rate index."""

    def __init__(self, channels: int, n_rates: int):
        super().__init__(channels, n_rates)
        self.n_rates = n_rates

    def condition(self, ell, batch: int) -> torch.Tensor:
        ell = torch.as_tensor(ell, dtype=torch.long)
        if ell.dim() == 0:
            ell = ell.expand(batch)
        if bool(((ell < 1) | (ell > self.n_rates)).any()):
            raise IndexError(f"rate index out of range [1, {self.n_rates}]: {ell.tolist()}")
        return F.one_hot(ell - 1, self.n_rates).reshape(batch, self.n_rates)

    def forward(self, z, ell):
        return self.modulate(z, self.condition(ell, z.shape[0]).to(z.device))


class CondSequential(nn.ModuleList):
    """Sequential container that routes SNR / rate conditioning to gates."""

    def forward(self, x, eta=None, ell=None):
        for m in self:
            if isinstance(m, SNRGate):
                x = m(x, eta)
            elif isinstance(m, RateGate):
                x = m(x, ell)
            else:
                x = m(x)
        return x
