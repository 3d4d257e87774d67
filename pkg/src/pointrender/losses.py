"""Training losses: robust pixel distance, perceptual feature distance, spectral distance.

All losses are means, so values are comparable across resolutions. They are
computed on the renderer's pre-clamp output so gradients survive saturation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from .assets import asset_path
from .errors import ConfigError, DataError

HUBER_DELTA = 0.1

# capture points inside the 19-layer extractor: after the activations that
# follow its 2nd, 4th, 8th and 12th convolutions
_VGG19_TAPS = (3, 8, 17, 26)
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LossWeights:
    lambda_huber: float = 1e3
    lambda_vgg: float = 1.0
    lambda_fft: float = 1.0

    def __post_init__(self):
        if min(self.lambda_huber, self.lambda_vgg, self.lambda_fft) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.lambda_huber == self.lambda_vgg == self.lambda_fft == 0:
            raise ConfigError("at least one loss weight must be positive")


def _as_bchw(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 3:  # H×W×C
        return x.permute(2, 0, 1).unsqueeze(0)
    if x.dim() == 4:
        return x
    raise DataError(f"expected an image tensor, got shape {tuple(x.shape)}")


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    p, t = _as_bchw(pred), _as_bchw(target)
    if p.shape != t.shape:
        raise DataError(f"prediction {tuple(p.shape)} and target {tuple(t.shape)} differ")
    return p, t


def huber(pred: torch.Tensor, target: torch.Tensor,
          delta: float = HUBER_DELTA) -> torch.Tensor:
    """Mean robust distance: quadratic within delta, linear beyond it."""
    if delta <= 0:
        raise ConfigError(f"huber delta must be positive, got {delta}")
    p, t = _check_pair(pred, target)
    r = (p - t).abs()
    quad = 0.5 * r * r
    lin = delta * (r - 0.5 * delta)
    return torch.where(r <= delta, quad, lin).mean()


class _Vgg19Features(nn.Module):
    """Frozen 19-layer feature extractor truncated at the last tap."""

    def __init__(self, state_dict: dict):
        super().__init__()
        from torchvision.models import vgg19

        full = vgg19(weights=None).features
        missing, unexpected = full.load_state_dict(state_dict, strict=False)
        if any(k.split(".")[0].isdigit() and int(k.split(".")[0]) <= max(_VGG19_TAPS)
               for k in missing):
            raise DataError(f"feature extractor weights incomplete: missing {missing[:4]}")
        self.layers = full[: max(_VGG19_TAPS) + 1]
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (x - self.mean) / self.std
        taps = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in _VGG19_TAPS:
                taps.append(x)
        return taps


@lru_cache(maxsize=2)
def _vgg_extractor(path_str: str) -> _Vgg19Features:
    state = torch.load(path_str, map_location="cpu", weights_only=True)
    return _Vgg19Features(state)


def vgg_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Sum over tapped layers of mean absolute feature differences."""
    p, t = _check_pair(pred, target)
    extractor = _vgg_extractor(str(asset_path("vgg19_features.pt")))
    if p.dtype != torch.float32:
        p, t = p.float(), t.float()
    total = None
    for fp, ft in zip(extractor(p), extractor(t)):
        term = (fp - ft).abs().mean()
        total = term if total is None else total + term
    return total


def fft_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference of the half-plane real-FFT spectra, per channel."""
    p, t = _check_pair(pred, target)
    sp = torch.fft.rfft2(p, dim=(-2, -1))
    st = torch.fft.rfft2(t, dim=(-2, -1))
    diff = sp - st
    return torch.stack([diff.real, diff.imag], dim=0).abs().mean()


def total_loss(pred: torch.Tensor, target: torch.Tensor,
               weights: LossWeights = LossWeights(), delta: float = HUBER_DELTA,
               ) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the three losses plus a per-term breakdown for logging.

    The perceptual term is skipped entirely (not just zero-weighted) when its
    weight is zero, so no extractor asset is needed in that configuration.
    """
    terms: dict[str, torch.Tensor] = {
        "huber": huber(pred, target, delta),
        "fft": fft_loss(pred, target),
    }
    terms["vgg"] = (vgg_loss(pred, target) if weights.lambda_vgg != 0
                    else torch.zeros((), dtype=terms["huber"].dtype))
    total = (weights.lambda_huber * terms["huber"]
             + weights.lambda_vgg * terms["vgg"]
             + weights.lambda_fft * terms["fft"])
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    return total, breakdown
