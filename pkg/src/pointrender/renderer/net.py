"""Multi-scale renderer: gated blocks per scale, coarse-to-fine fusion, RGB head."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from torch import nn

from ..errors import ConfigError, DataError
from .blocks import GatedFusionBlock, ResidualBlock, _conv


@dataclass(frozen=True)
class ArchConfig:
    """Architecture knobs; widths are listed fine to coarse."""

    buffer_channels: int = 8
    num_scales: int = 4
    widths: tuple[int, ...] = (64, 128, 256, 256)
    global_ratio: float = 0.5
    body_blocks: int = 2
    attention_per_channel: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.num_scales < 1:
            raise ConfigError(f"num_scales must be at least 1, got {self.num_scales}")
        if len(self.widths) != self.num_scales:
            raise ConfigError(
                f"widths {self.widths} must list one width per scale ({self.num_scales})")
        if self.buffer_channels < 2:
            raise ConfigError("buffer_channels must be at least 2 (spectral split)")
        if self.body_blocks < 0:
            raise ConfigError("body_blocks must be non-negative")

    def to_yaml(self) -> str:
        return yaml.safe_dump({
            "buffer_channels": self.buffer_channels,
            "num_scales": self.num_scales,
            "widths": list(self.widths),
            "global_ratio": self.global_ratio,
            "body_blocks": self.body_blocks,
            "attention_per_channel": self.attention_per_channel,
        }, sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ArchConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed architecture config: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("architecture config must be a key-value mapping")
        known = {"buffer_channels", "num_scales", "widths", "global_ratio",
                 "body_blocks", "attention_per_channel"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown architecture keys: {sorted(unknown)}")
        if "widths" in raw:
            raw["widths"] = tuple(raw["widths"])
        return cls(**raw)


class MultiScaleRenderer(nn.Module):
    """Map per-scale feature buffers to an RGB image.

    Each scale's buffer first passes a gated fusion block, then a residual
    body; coarse features are nearest-neighbor upsampled, concatenated with
    the next finer scale, and merged by a 1x1 conv. A linear 3-channel head
    finishes; forward returns the unclamped image plus per-scale attention
    maps, render() clamps to [0,1].
    """

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        c, widths = config.buffer_channels, config.widths
        self.gated = nn.ModuleList([
            GatedFusionBlock(c, w, config.global_ratio, config.attention_per_channel)
            for w in widths])
        self.body = nn.ModuleList([
            nn.Sequential(*[ResidualBlock(w) for _ in range(config.body_blocks)])
            for w in widths])
        self.merge = nn.ModuleList([
            nn.Conv2d(widths[s] + widths[s + 1], widths[s], 1)
            for s in range(config.num_scales - 1)])
        self.head = _conv(widths[0], 3)
        with torch.no_grad():
            self.head.bias.zero_()

    def _to_batched(self, buffers: list[torch.Tensor]) -> list[torch.Tensor]:
        cfg = self.config
        if len(buffers) != cfg.num_scales:
            raise ConfigError(
                f"renderer built for {cfg.num_scales} scales, got {len(buffers)} buffers")
        xs = []
        for buf in buffers:
            if buf.dim() == 3:  # H×W×C from gather
                buf = buf.permute(2, 0, 1).unsqueeze(0)
            xs.append(buf)
        h0, w0 = xs[0].shape[-2:]
        for s, x in enumerate(xs):
            if x.shape[1] != cfg.buffer_channels:
                raise ConfigError(
                    f"buffer {s} has {x.shape[1]} channels, expected {cfg.buffer_channels}")
            expect = (-(-h0 // (1 << s)), -(-w0 // (1 << s)))
            if tuple(x.shape[-2:]) != expect:
                raise DataError(
                    f"buffer {s} resolution {tuple(x.shape[-2:])} breaks the pyramid "
                    f"rule (expected {expect})")
        return xs

    def forward(self, buffers: list[torch.Tensor],
                ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """buffers: fine->coarse list of H_s×W_s×C (or batched C-first) grids."""
        xs = self._to_batched(buffers)

        attentions: list[torch.Tensor] = [None] * len(xs)
        feats: list[torch.Tensor] = [None] * len(xs)
        for s in range(len(xs) - 1, -1, -1):
            gated, attn = self.gated[s](xs[s])
            attentions[s] = attn
            if s < len(xs) - 1:
                up = F.interpolate(feats[s + 1], size=gated.shape[-2:], mode="nearest")
                gated = self.merge[s](torch.cat([gated, up], dim=1))
            feats[s] = self.body[s](gated)
        raw = self.head(feats[0])
        return raw, attentions

    def render(self, buffers: list[torch.Tensor]) -> torch.Tensor:
        """Clamped H×W×3 image in [0,1]."""
        raw, _ = self.forward(buffers)
        return raw.clamp(0.0, 1.0)[0].permute(1, 2, 0)

    def param_report(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, element count) per parameter, total appended last."""
        rows = [(name, tuple(p.shape), p.numel())
                for name, p in self.named_parameters()]
        rows.append(("total", (), sum(r[2] for r in rows)))
        return rows


def build_renderer(config: ArchConfig | None = None, seed: int | None = None,
                   ) -> MultiScaleRenderer:
    """Construct a renderer; a seed makes the weight draw reproducible."""
    if config is None:
        config = ArchConfig()
    if seed is not None:
        torch.manual_seed(seed)
    return MultiScaleRenderer(config)


def save_renderer(path: str | Path, model: MultiScaleRenderer) -> None:
    """Named-array archive with the architecture config embedded."""
    arrays = {name: p.detach().cpu().numpy()
              for name, p in model.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __arch__=np.frombuffer(model.config.to_yaml().encode(), dtype=np.uint8),
             **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_renderer(path: str | Path) -> MultiScaleRenderer:
    path = Path(path)
    if not path.exists():
        raise DataError(f"renderer checkpoint {path} does not exist")
    with np.load(path) as archive:
        if "__arch__" not in archive:
            raise DataError(f"{path} is not a renderer checkpoint (no architecture entry)")
        config = ArchConfig.from_yaml(bytes(archive["__arch__"]).decode())
        model = MultiScaleRenderer(config)
        state = {name: torch.from_numpy(archive[name])
                 for name in archive.files if name != "__arch__"}
    model.load_state_dict(state)
    return model
