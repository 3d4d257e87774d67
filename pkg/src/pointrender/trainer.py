"""Joint optimization of the point texture and the renderer.

One epoch is one pass of as many batches as there are training images. Each
step rasterizes croped views (outside any gradient path), gathers neural
buffers, renders, and backpropagates the weighted loss into the texture table
and the renderer with their two learning rates.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from .errors import ConfigError, NumericError
from .losses import HUBER_DELTA, LossWeights, total_loss
from .rasterizer import rasterize_pyramid
from .renderer.net import ArchConfig, MultiScaleRenderer, build_renderer, load_renderer, save_renderer
from .scene_io.scene import Scene, crop_camera
from .texture import NeuralTexture, gather, init_texture, load_texture, save_texture
from .types import CameraModel, PointCloud, Pose

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr_texture: float = 1e-1
    lr_renderer: float = 1e-4
    batch_size: int = 8
    crop: int = 256
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    max_epochs: int = 100
    max_steps: int | None = None
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    huber_delta: float = HUBER_DELTA
    texture_channels: int = 8
    arch: ArchConfig = field(default_factory=ArchConfig)
    deterministic: bool = False
    sparse_texture: bool = True
    checkpoint_every: int = 1
    grad_clip: float | None = 100.0
    freeze_env: bool = False

    def __post_init__(self):
        if self.lr_texture <= 0 or self.lr_renderer <= 0:
            raise ConfigError("learning rates must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive when set")
        if self.batch_size < 1 or self.crop < 1:
            raise ConfigError("batch_size and crop must be positive")
        if self.plateau_patience < 1 or not (0 < self.plateau_factor < 1):
            raise ConfigError("plateau_patience must be >=1 and factor in (0,1)")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive when set")
        if self.texture_channels != self.arch.buffer_channels:
            raise ConfigError(
                f"texture_channels {self.texture_channels} must match the "
                f"renderer's buffer_channels {self.arch.buffer_channels}")

    def to_yaml(self) -> str:
        doc = dataclasses.asdict(self)
        doc["loss"] = {"lambda_huber": self.loss.lambda_huber,
                       "lambda_vgg": self.loss.lambda_vgg,
                       "lambda_fft": self.loss.lambda_fft}
        doc["arch"] = yaml.safe_load(self.arch.to_yaml())
        return yaml.safe_dump(doc, sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "TrainConfig":
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"malformed train config: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("train config must be a key-value mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if "loss" in raw:
            raw["loss"] = LossWeights(**raw["loss"])
        if "arch" in raw:
            raw["arch"] = ArchConfig(**{
                k: tuple(v) if k == "widths" else v for k, v in raw["arch"].items()})
        if "max_steps" in raw and raw["max_steps"] is not None:
            raw["max_steps"] = int(raw["max_steps"])
        return cls(**raw)


@dataclass
class CropSample:
    image: np.ndarray  # crop×crop×3 float32
    camera: CameraModel
    pose: Pose
    image_id: int
    origin: tuple[int, int]
    padded: bool = False


def sample_batch(scene: Scene, config: TrainConfig,
                 rng: np.random.Generator) -> list[CropSample]:
    """batch_size crops from uniformly drawn training views and window origins."""
    train = scene.train_images
    if not train:
        raise ConfigError("train split is empty")
    crop = config.crop
    batch = []
    for view_idx in rng.integers(0, len(train), size=config.batch_size):
        view = train[view_idx]
        img = view.image
        h, w = img.shape[:2]
        if h < crop or w < crop:
            pad_v, pad_u = max(0, crop - h), max(0, crop - w)
            img = np.pad(img, ((0, pad_v), (0, pad_u), (0, 0)), mode="reflect")
            camera = CameraModel(fx=view.camera.fx, fy=view.camera.fy,
                                 cx=view.camera.cx, cy=view.camera.cy,
                                 width=crop, height=crop)
            batch.append(CropSample(image=img[:crop, :crop], camera=camera,
                                    pose=view.pose, image_id=view.id,
                                    origin=(0, 0), padded=True))
            continue
        u0 = int(rng.integers(0, w - crop + 1))
        v0 = int(rng.integers(0, h - crop + 1))
        batch.append(CropSample(
            image=img[v0:v0 + crop, u0:u0 + crop],
            camera=crop_camera(view.camera, (u0, v0), (crop, crop)),
            pose=view.pose, image_id=view.id, origin=(u0, v0)))
    return batch


def plateau_scheduler(loss_history: list[float], current_lr: float,
                      patience: int = 5, factor: float = 0.5) -> float:
    """Halve the rate iff each of the last `patience` epochs failed to improve
    on the best loss seen before it; otherwise return it unchanged."""
    n = len(loss_history)
    if n <= patience:
        return current_lr
    for i in range(n - patience, n):
        if loss_history[i] < min(loss_history[:i]):
            return current_lr
    return current_lr * factor


@dataclass
class TrainLog:
    entries: list[dict] = field(default_factory=list)

    def append(self, **entry) -> None:
        self.entries.append(entry)

    @property
    def epoch_losses(self) -> list[float]:
        return [e["loss"] for e in self.entries]


def _clip_gradients(texture: NeuralTexture, renderer: MultiScaleRenderer,
                    max_norm: float) -> None:
    # The zero-initialized texture renders spatially constant buffers on the
    # first step, so every instance norm backpropagates through zero variance
    # and amplifies by ~1/sqrt(eps) per layer; unclipped, the squared gradient
    # overflows float32 inside the optimizer state. Norms are accumulated in
    # float64 because the squared entries themselves overflow float32.
    params = [p for p in renderer.parameters() if p.grad is not None]
    if params:
        total = float(torch.sqrt(
            sum(p.grad.double().pow(2).sum() for p in params)))
        if total > max_norm:
            scale = max_norm / total
            for p in params:
                p.grad.mul_(scale)
    grad = texture.table.grad
    if grad is None:
        return
    if grad.is_sparse:
        grad = grad.coalesce()
        norm = float(grad.values().double().norm())
        if norm > max_norm:
            texture.table.grad = grad * (max_norm / norm)
    else:
        norm = float(grad.double().norm())
        if norm > max_norm:
            grad.mul_(max_norm / norm)


def _forward_batch(cloud: PointCloud, texture: NeuralTexture,
                   renderer: MultiScaleRenderer, batch: list[CropSample],
                   sparse: bool) -> tuple[torch.Tensor, torch.Tensor]:
    """Rasterize+gather+render a batch; returns (pre-clamp BCHW pred, BCHW target)."""
    num_scales = renderer.config.num_scales
    per_scale: list[list[torch.Tensor]] = [[] for _ in range(num_scales)]
    targets = []
    for sample in batch:
        frags = rasterize_pyramid(cloud, sample.camera, sample.pose, num_scales)
        for s, frag in enumerate(frags):
            per_scale[s].append(gather(texture, frag, sparse=sparse).permute(2, 0, 1))
        targets.append(torch.from_numpy(sample.image.transpose(2, 0, 1).copy()))
    buffers = [torch.stack(bufs) for bufs in per_scale]
    raw, _ = renderer(buffers)
    return raw, torch.stack(targets)


def save_checkpoint(out_dir: str | Path, cloud: PointCloud, texture: NeuralTexture,
                    renderer: MultiScaleRenderer, config: TrainConfig,
                    optimizers: dict[str, torch.optim.Optimizer] | None = None,
                    scene_manifest: str | None = None,
                    config_text: str | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_texture(out_dir / "texture", cloud, texture)
    (out_dir / "renderer").mkdir(exist_ok=True)
    save_renderer(out_dir / "renderer" / "model.npz", renderer)
    (out_dir / "renderer" / "arch.yaml").write_text(renderer.config.to_yaml())
    (out_dir / "config.yaml").write_text(
        config.to_yaml() if config_text is None else config_text)
    if optimizers:
        opt_dir = out_dir / "optimizer"
        opt_dir.mkdir(exist_ok=True)
        for name, opt in optimizers.items():
            torch.save(opt.state_dict(), opt_dir / f"{name}.pt")
    if scene_manifest is not None:
        (out_dir / "scene.yaml").write_text(scene_manifest)


def load_checkpoint(ckpt_dir: str | Path,
                    ) -> tuple[PointCloud, NeuralTexture, MultiScaleRenderer, TrainConfig]:
    ckpt_dir = Path(ckpt_dir)
    cloud, texture = load_texture(ckpt_dir / "texture")
    renderer = load_renderer(ckpt_dir / "renderer" / "model.npz")
    config = TrainConfig.from_yaml((ckpt_dir / "config.yaml").read_text())
    return cloud, texture, renderer, config


def train(scene: Scene, config: TrainConfig, out_dir: str | Path | None = None,
          scene_manifest: str | None = None, config_text: str | None = None,
          init: tuple[NeuralTexture, MultiScaleRenderer] | None = None,
          ) -> tuple[NeuralTexture, MultiScaleRenderer, TrainLog]:
    """Optimize texture and renderer on the scene's training split.

    init, when given, continues from existing (texture, renderer) weights
    instead of a fresh zero texture and seeded renderer. freeze_env pins the
    environment feature row at zero throughout, the zero-fill baseline for
    environment-modeling ablations.
    """
    if not scene.train_images:
        raise ConfigError("train split is empty")
    min_dim = min(min(im.camera.width, im.camera.height) for im in scene.train_images)
    if config.crop > min_dim:
        log.warning("crop %d exceeds smallest image dimension %d; "
                    "small images will be reflect-padded", config.crop, min_dim)

    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    if init is None:
        texture = init_texture(len(scene.cloud), config.texture_channels)
        renderer = build_renderer(config.arch, seed=config.seed)
    else:
        texture, renderer = init
        if texture.n_points != len(scene.cloud):
            raise ConfigError(
                f"initial texture has {texture.n_points} rows but the cloud "
                f"has {len(scene.cloud)} points")
        if texture.channels != config.texture_channels:
            raise ConfigError(
                f"initial texture has {texture.channels} channels, "
                f"config says {config.texture_channels}")
    if config.freeze_env:
        with torch.no_grad():
            texture.table[-1].zero_()

    opt_texture: torch.optim.Optimizer
    if config.sparse_texture:
        opt_texture = torch.optim.SparseAdam([texture.table], lr=config.lr_texture)
    else:
        opt_texture = torch.optim.Adam([texture.table], lr=config.lr_texture)
    opt_renderer = torch.optim.Adam(renderer.parameters(), lr=config.lr_renderer)
    optimizers = {"texture": opt_texture, "renderer": opt_renderer}

    train_log = TrainLog()
    steps_per_epoch = len(scene.split.train_ids)
    lr_scale = 1.0
    window_start = 0  # epoch losses before this index predate the last lr change
    total_steps = 0
    logged_entries = 0
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "log.jsonl").write_text("")

    for epoch in range(config.max_epochs):
        epoch_losses = []
        breakdown_sums: dict[str, float] = {}
        t0 = time.monotonic()
        for _ in range(steps_per_epoch):
            if config.max_steps is not None and total_steps >= config.max_steps:
                break
            batch = sample_batch(scene, config, rng)
            try:
                raw, target = _forward_batch(scene.cloud, texture, renderer, batch,
                                             sparse=config.sparse_texture)
                loss, breakdown = total_loss(raw, target, config.loss,
                                             config.huber_delta)
            except (MemoryError, RuntimeError) as e:
                if isinstance(e, RuntimeError) and "memory" not in str(e).lower():
                    raise
                raise NumericError(
                    f"out of memory during training step {total_steps}; reduce "
                    f"crop (now {config.crop}) or batch_size (now "
                    f"{config.batch_size})") from e
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} step {total_steps}; "
                    f"last epoch checkpoint retained" + (f" in {out_dir}" if out_dir else ""))
            opt_texture.zero_grad()
            opt_renderer.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                _clip_gradients(texture, renderer, config.grad_clip)
            opt_texture.step()
            opt_renderer.step()
            if config.freeze_env:
                with torch.no_grad():
                    texture.table[-1].zero_()
            epoch_losses.append(float(loss.detach()))
            for k, v in breakdown.items():
                breakdown_sums[k] = breakdown_sums.get(k, 0.0) + v
            total_steps += 1

        if not epoch_losses:
            break
        mean_loss = float(np.mean(epoch_losses))
        train_log.append(
            epoch=epoch, loss=mean_loss,
            breakdown={k: v / len(epoch_losses) for k, v in breakdown_sums.items()},
            lr_texture=config.lr_texture * lr_scale,
            lr_renderer=config.lr_renderer * lr_scale,
            steps=total_steps, seconds=round(time.monotonic() - t0, 3))

        if out_dir is not None and (epoch + 1) % config.checkpoint_every == 0:
            save_checkpoint(out_dir, scene.cloud, texture, renderer, config,
                            optimizers, scene_manifest, config_text)
            with open(Path(out_dir) / "log.jsonl", "a") as f:
                for entry in train_log.entries[logged_entries:]:
                    f.write(json.dumps(entry) + "\n")
            logged_entries = len(train_log.entries)

        window = train_log.epoch_losses[window_start:]
        current = config.lr_texture * lr_scale
        updated = plateau_scheduler(window, current, config.plateau_patience,
                                    config.plateau_factor)
        if updated != current:
            lr_scale *= config.plateau_factor
            window_start = len(train_log.epoch_losses)
            for opt in (opt_texture, opt_renderer):
                for group in opt.param_groups:
                    group["lr"] *= config.plateau_factor
            log.info("plateau: learning rates scaled to %g of initial", lr_scale)

        if config.max_steps is not None and total_steps >= config.max_steps:
            break

    if out_dir is not None:
        save_checkpoint(out_dir, scene.cloud, texture, renderer, config,
                        optimizers, scene_manifest, config_text)
        with open(Path(out_dir) / "log.jsonl", "a") as f:
            for entry in train_log.entries[logged_entries:]:
                f.write(json.dumps(entry) + "\n")
    return texture, renderer, train_log
