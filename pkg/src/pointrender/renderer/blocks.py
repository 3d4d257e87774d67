"""Building blocks of the renderer: spectral convolution and gated fusion.

Convolutions use reflect padding throughout, so a spatially constant input
stays constant through every layer; this keeps border behavior sane and makes
degenerate inputs (all-environment buffers) well defined.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError


def _conv(in_c: int, out_c: int, kernel: int = 3) -> nn.Conv2d:
    return nn.Conv2d(in_c, out_c, kernel, padding=kernel // 2, padding_mode="reflect")


class FourierUnit(nn.Module):
    """Pointwise convolution in the half-spectrum of a real 2D FFT.

    rfft2 -> 1x1 conv over stacked (real, imag) channels -> irfft2 back to the
    original spatial size. Linear by construction: with identity weights and
    zero bias the unit is the identity map (up to transform round-off).
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        # a bias here would add a spatial delta after the inverse transform
        self.conv = nn.Conv2d(channels * 2, channels * 2, 1, bias=False)

    def set_identity(self) -> None:
        with torch.no_grad():
            eye = torch.eye(self.channels * 2, dtype=self.conv.weight.dtype)
            self.conv.weight.copy_(eye[:, :, None, None])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h < 2 or w < 2:
            raise ConfigError(f"spectral path needs at least 2x2 input, got {h}x{w}")
        spec = torch.fft.rfft2(x, norm="ortho")
        stacked = torch.cat([spec.real, spec.imag], dim=1)
        out = self.conv(stacked)
        re, im = out.chunk(2, dim=1)
        return torch.fft.irfft2(torch.complex(re, im), s=(h, w), norm="ortho")


class SpectralTransform(nn.Module):
    """Channel mixing around a Fourier unit: 1x1 conv, spectral conv, 1x1 conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_in = nn.Conv2d(channels, channels, 1)
        self.unit = FourierUnit(channels)
        self.conv_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.leaky_relu(self.conv_in(x), 0.2)
        x = self.unit(x)
        return self.conv_out(x)


class FourierConvBlock(nn.Module):
    """Split-channel convolution: a local conv lane and a spectral (global) lane.

    Channels are divided by global_ratio; the four cross terms
    local->local, local->global, global->local, global->global are summed,
    with the global->global term running through the spectral transform.
    """

    def __init__(self, channels: int, global_ratio: float = 0.5):
        super().__init__()
        cg = channels * global_ratio
        if abs(cg - round(cg)) > 1e-9 or not (0 < round(cg) < channels):
            raise ConfigError(
                f"global_ratio {global_ratio} does not split {channels} channels "
                f"into two non-empty integer groups")
        self.cg = int(round(cg))
        self.cl = channels - self.cg
        self.ll = _conv(self.cl, self.cl)
        self.lg = _conv(self.cl, self.cg)
        self.gl = _conv(self.cg, self.cl)
        self.gg = SpectralTransform(self.cg)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        xl, xg = x[:, : self.cl], x[:, self.cl:]
        yl = self.ll(xl) + self.gl(xg)
        yg = self.lg(xl) + self.gg(xg)
        return torch.cat([F.leaky_relu(yl, 0.2), F.leaky_relu(yg, 0.2)], dim=1)


class GatedFusionBlock(nn.Module):
    """Gate features by fused local and spectral context.

    A pure-conv local branch and a spectral-conv global branch are fused by a
    1x1 conv; a gate head turns the fusion into a sigmoid attention map that
    multiplies the content head. The attention map is returned for inspection.
    Gate-head weights start at zero, so attention begins at exactly 0.5.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 global_ratio: float = 0.5, attention_per_channel: bool = False):
        super().__init__()
        self.local_branch = nn.Sequential(
            _conv(in_channels, out_channels), nn.LeakyReLU(0.2),
            _conv(out_channels, out_channels), nn.LeakyReLU(0.2))
        self.global_branch = nn.Sequential(
            _conv(in_channels, out_channels), nn.LeakyReLU(0.2),
            FourierConvBlock(out_channels, global_ratio))
        self.fuse = nn.Conv2d(out_channels * 2, out_channels, 1)
        gate_channels = out_channels if attention_per_channel else 1
        self.gate_head = _conv(out_channels, gate_channels)
        self.content_head = _conv(out_channels, out_channels)
        with torch.no_grad():
            self.gate_head.weight.zero_()
            self.gate_head.bias.zero_()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        fused = self.fuse(torch.cat([self.local_branch(x), self.global_branch(x)], dim=1))
        attention = torch.sigmoid(self.gate_head(fused))
        return attention * self.content_head(fused), attention


class ResidualBlock(nn.Module):
    """Conv-norm-act twice with a skip; per-channel affine instance norm."""

    def __init__(self, channels: int):
        super().__init__()
        # convs feeding a norm carry no bias (the norm would cancel it)
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect", bias=False),
            nn.InstanceNorm2d(channels, affine=True),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect", bias=False),
            nn.InstanceNorm2d(channels, affine=True))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(x + self.body(x), 0.2)
