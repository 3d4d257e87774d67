"""Image-quality metrics and test-split evaluation reports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
from scipy.signal import fftconvolve
from torch import nn

from .assets import asset_path
from .errors import DataError
from .rasterizer import rasterize_pyramid
from .texture import NeuralTexture, gather
from .types import PointCloud, SplitSpec

log = logging.getLogger(__name__)

PSNR_CAP = 99.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1, _SSIM_K2 = 0.01, 0.03

# taps after each relu group of the 16-layer backbone used by the perceptual metric
_VGG16_SLICES = ((0, 4), (4, 9), (9, 16), (16, 23), (23, 30))
_LPIPS_SHIFT = (-0.030, -0.088, -0.188)
_LPIPS_SCALE = (0.458, 0.448, 0.450)


def _check_images(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"image shapes differ: {p.shape} vs {t.shape}")
    for name, a in (("prediction", p), ("target", t)):
        if a.min() < -1e-6 or a.max() > 1 + 1e-6:
            raise DataError(f"{name} values outside [0,1]: [{a.min():.4g}, {a.max():.4g}]")
    return p, t


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB on [0,1] images, capped at 99."""
    p, t = _check_images(pred, target)
    mse = float(np.mean((p - t) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


@lru_cache(maxsize=1)
def _ssim_kernel() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2
    coords = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(coords ** 2) / (2 * _SSIM_SIGMA ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean structural similarity: 11×11 Gaussian window (σ=1.5), channel-averaged."""
    p, t = _check_images(pred, target)
    if p.ndim == 2:
        p, t = p[..., None], t[..., None]
    if p.shape[0] < _SSIM_WINDOW or p.shape[1] < _SSIM_WINDOW:
        raise DataError(
            f"image {p.shape[:2]} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    kernel = _ssim_kernel()
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2

    def win(x):
        return fftconvolve(x, kernel, mode="valid")

    values = []
    for ch in range(p.shape[2]):
        x, y = p[..., ch], t[..., ch]
        mu_x, mu_y = win(x), win(y)
        var_x = win(x * x) - mu_x ** 2
        var_y = win(y * y) - mu_y ** 2
        cov = win(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


class _PerceptualMetric(nn.Module):
    """16-layer backbone with published linear calibration heads."""

    def __init__(self, feature_state: dict, lin_weights: list[torch.Tensor]):
        super().__init__()
        from torchvision.models import vgg16

        feats = vgg16(weights=None).features
        feats.load_state_dict(feature_state)
        self.slices = nn.ModuleList([feats[a:b] for a, b in _VGG16_SLICES])
        if len(lin_weights) != len(_VGG16_SLICES):
            raise DataError(
                f"perceptual metric asset has {len(lin_weights)} calibration heads, "
                f"expected {len(_VGG16_SLICES)}")
        self.lins = nn.ParameterList(
            [nn.Parameter(w.clone().float(), requires_grad=False) for w in lin_weights])
        self.register_buffer("shift", torch.tensor(_LPIPS_SHIFT).view(1, 3, 1, 1))
        self.register_buffer("scale", torch.tensor(_LPIPS_SCALE).view(1, 3, 1, 1))
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        def norm_input(x):
            return (x * 2 - 1 - self.shift) / self.scale

        def unit(x):
            return x / torch.sqrt((x * x).sum(dim=1, keepdim=True) + 1e-10)

        xa, xb = norm_input(pred), norm_input(target)
        total = torch.zeros(())
        for sl, lin in zip(self.slices, self.lins):
            xa, xb = sl(xa), sl(xb)
            d = (unit(xa) - unit(xb)) ** 2
            w = lin.view(1, -1, 1, 1)
            total = total + (d * w).sum(dim=1).mean()
        return total


@lru_cache(maxsize=2)
def _perceptual_metric(path_str: str) -> _PerceptualMetric:
    payload = torch.load(path_str, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or "features" not in payload or "lins" not in payload:
        raise DataError(f"{path_str} is not a perceptual-metric asset "
                        "(expected keys 'features' and 'lins')")
    return _PerceptualMetric(payload["features"], list(payload["lins"]))


def lpips(pred: np.ndarray, target: np.ndarray) -> float:
    """Learned perceptual distance (VGG backbone variant)."""
    p, t = _check_images(pred, target)
    metric = _perceptual_metric(str(asset_path("lpips_vgg.pt")))
    with torch.no_grad():
        pa = torch.from_numpy(p).float().permute(2, 0, 1).unsqueeze(0)
        tb = torch.from_numpy(t).float().permute(2, 0, 1).unsqueeze(0)
        return float(metric(pa, tb))


def lpips_available() -> bool:
    try:
        asset_path("lpips_vgg.pt")
        return True
    except Exception:
        return False


# ---------------------------------------------------------------------------
# split evaluation

@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[dict], config: dict | None = None) -> "MetricsReport":
        means = {}
        for key in ("psnr", "ssim", "lpips"):
            vals = [r[key] for r in rows if r.get(key) is not None]
            if vals:
                means[key] = float(np.mean(vals))
        return cls(rows=sorted(rows, key=lambda r: r["id"]), means=means,
                   config=config or {})

    def save_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            for row in self.rows:
                f.write(json.dumps(row) + "\n")
            f.write(json.dumps({"means": self.means, "config": self.config}) + "\n")

    def format_table(self) -> str:
        header = f"{'view':>6} {'psnr':>8} {'ssim':>8} {'lpips':>8}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lp = f"{r['lpips']:8.4f}" if r.get("lpips") is not None else f"{'-':>8}"
            lines.append(f"{r['id']:>6} {r['psnr']:8.2f} {r['ssim']:8.4f} {lp}")
        mean_lp = (f"{self.means['lpips']:8.4f}" if "lpips" in self.means
                   else f"{'-':>8}")
        if self.means:
            lines.append("-" * len(header))
            lines.append(f"{'mean':>6} {self.means['psnr']:8.2f} "
                         f"{self.means['ssim']:8.4f} {mean_lp}")
        return "\n".join(lines)


def render_view(cloud: PointCloud, texture: NeuralTexture, renderer, image,
                rasterize=rasterize_pyramid) -> np.ndarray:
    """Rasterize, gather, and render one posed view at native resolution.

    rasterize: pyramid function of (cloud, camera, pose, num_scales); the
    reference z-buffer by default, swappable for the accelerated kernel.
    """
    frags = rasterize(cloud, image.camera, image.pose,
                      renderer.config.num_scales)
    with torch.no_grad():
        buffers = [gather(texture, f) for f in frags]
        return renderer.render(buffers).cpu().numpy()


def evaluate_split(scene, texture: NeuralTexture, renderer,
                   split: SplitSpec | None = None, with_lpips: bool | None = None,
                   out_dir: str | Path | None = None,
                   config_echo: dict | None = None,
                   rasterize=rasterize_pyramid) -> MetricsReport:
    """Render every test view and score it; returns the assembled report.

    with_lpips: None picks up the perceptual metric only when its asset
    resolves; True requires it; False skips it.
    """
    split = split or scene.split
    if not split.test_ids:
        log.warning("test split is empty; report has no rows")
        return MetricsReport.from_rows([], config_echo)
    use_lpips = lpips_available() if with_lpips is None else with_lpips

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for view_id in split.test_ids:
        view = scene.image(view_id)
        pred = render_view(scene.cloud, texture, renderer, view, rasterize)
        target = view.image.astype(np.float64)
        row = {"id": view_id, "psnr": psnr(pred, target), "ssim": ssim(pred, target),
               "lpips": lpips(pred, target) if use_lpips else None}
        rows.append(row)
        if out_dir is not None:
            from PIL import Image as PILImage
            arr = (np.clip(pred, 0, 1) * 255).round().astype(np.uint8)
            PILImage.fromarray(arr).save(out_dir / f"view_{view_id:05d}.png")
    return MetricsReport.from_rows(rows, config_echo)
