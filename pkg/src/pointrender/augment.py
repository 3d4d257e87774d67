"""Point cloud densification by candidate sampling and density verification.

Each round samples Gaussian candidates around existing points, appends them
with zero texture rows, trains briefly, and keeps only candidates whose
pseudo-density clears a threshold derived from the existing points. Candidates
the cameras never see keep exactly zero rows, so they always fall below any
positive threshold.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import ConfigError, DataError
from .scene_io.ply import save_ply
from .scene_io.scene import Scene
from .texture import NeuralTexture, prune, pseudo_density
from .trainer import TrainConfig, train
from .types import PointCloud

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    n_candidates: int | None = None       # None: half the current point count
    sigma_scale: float = 3.0              # std as multiple of median NN distance
    sigma: float | None = None            # absolute std override
    threshold_percentile: float = 10.0    # of existing points' pseudo-density
    threshold_absolute: float | None = None
    iterations: int = 1
    verify_train_steps: int | None = None  # None: one epoch-equivalent
    from_scratch: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_candidates is not None and self.n_candidates < 0:
            raise ConfigError("n_candidates must be nonnegative")
        if self.sigma_scale <= 0:
            raise ConfigError("sigma_scale must be positive")
        if self.sigma is not None and self.sigma < 0:
            raise ConfigError("sigma must be nonnegative when set")
        if not (0 <= self.threshold_percentile < 100):
            raise ConfigError("threshold_percentile must be in [0, 100)")
        if self.iterations < 0:
            raise ConfigError("iterations must be nonnegative")
        if self.verify_train_steps is not None and self.verify_train_steps < 1:
            raise ConfigError("verify_train_steps must be positive when set")


def median_nn_distance(cloud: PointCloud) -> float:
    """Median distance from each point to its nearest other point."""
    if len(cloud) < 2:
        raise DataError("nearest-neighbor scale needs at least two points")
    dists, _ = cKDTree(cloud.positions).query(cloud.positions, k=2)
    return float(np.median(dists[:, 1]))


def _candidate_std(cloud: PointCloud, config: AugmentConfig) -> float:
    if config.sigma is not None:
        return config.sigma
    return config.sigma_scale * median_nn_distance(cloud)


def _draw_candidates(cloud: PointCloud, config: AugmentConfig,
                     rng: np.random.Generator,
                     ) -> tuple[np.ndarray, np.ndarray, float]:
    """Returns (candidate positions, parent indices, std used)."""
    if len(cloud) == 0:
        raise DataError("cannot sample candidates from an empty cloud")
    n = config.n_candidates if config.n_candidates is not None else len(cloud) // 2
    std = _candidate_std(cloud, config) if n > 0 else 0.0
    parents = rng.integers(0, len(cloud), size=n)
    offsets = rng.normal(0.0, std, size=(n, 3)) if std > 0 else np.zeros((n, 3))
    return cloud.positions[parents] + offsets, parents, std


def sample_candidates(cloud: PointCloud, config: AugmentConfig,
                      rng: np.random.Generator) -> PointCloud:
    """n_candidates points, each Gaussian-perturbed from a random parent."""
    positions, parents, _ = _draw_candidates(cloud, config, rng)
    colors = cloud.colors[parents] if cloud.colors is not None else None
    return PointCloud(positions=positions, colors=colors)


@dataclass
class VerifyResult:
    cloud: PointCloud           # original points plus surviving candidates
    kept: np.ndarray            # bool per candidate
    sigma: np.ndarray           # pseudo-density per row of the combined cloud
    threshold: float
    texture: NeuralTexture
    renderer: object


def _default_verify_config(scene: Scene, train_config: TrainConfig | None,
                           steps: int | None) -> TrainConfig:
    if train_config is None:
        min_dim = min(min(im.camera.width, im.camera.height)
                      for im in scene.train_images)
        train_config = TrainConfig(crop=min(256, min_dim))
    steps = steps if steps is not None else len(scene.train_images)
    return dataclasses.replace(train_config, max_steps=steps,
                               max_epochs=max(1, -(-steps // max(1, len(scene.train_images)))))


def _verify_round(scene: Scene, n_original: int, config: AugmentConfig,
                  train_config: TrainConfig | None = None,
                  init=None) -> VerifyResult:
    """Short training on the combined cloud, then threshold the candidates."""
    verify_config = _default_verify_config(scene, train_config,
                                           config.verify_train_steps)
    texture, renderer, _ = train(scene, verify_config, init=init)
    sigma = pseudo_density(texture).numpy()
    existing, candidates = sigma[:n_original], sigma[n_original:]
    if config.threshold_absolute is not None:
        threshold = config.threshold_absolute
    elif config.threshold_percentile == 0:
        threshold = -np.inf  # pure densification: nothing is pruned
    else:
        threshold = float(np.percentile(existing, config.threshold_percentile))
    kept = candidates >= threshold
    if len(candidates) and not kept.any():
        log.warning("all %d candidates fell below the density threshold %g",
                    len(candidates), threshold)
    positions = np.concatenate([scene.cloud.positions[:n_original],
                                scene.cloud.positions[n_original:][kept]])
    colors = None
    if scene.cloud.colors is not None:
        colors = np.concatenate([scene.cloud.colors[:n_original],
                                 scene.cloud.colors[n_original:][kept]])
    return VerifyResult(cloud=PointCloud(positions=positions, colors=colors),
                        kept=kept, sigma=sigma, threshold=threshold,
                        texture=texture, renderer=renderer)


def verify_and_prune(scene: Scene, n_original: int, config: AugmentConfig,
                     train_config: TrainConfig | None = None) -> PointCloud:
    """Scene.cloud holds original points then candidates; returns the kept set."""
    if not (0 <= n_original <= len(scene.cloud)):
        raise ConfigError(f"n_original {n_original} out of range for a cloud "
                          f"of {len(scene.cloud)} points")
    return _verify_round(scene, n_original, config, train_config).cloud


def augment(scene: Scene, config: AugmentConfig,
            train_config: TrainConfig | None = None,
            out_ply: str | Path | None = None,
            provenance_path: str | Path | None = None) -> PointCloud:
    """Run sampling+verification rounds; original points are never removed.

    Rounds after the first fine-tune from the previous round's surviving
    weights unless from_scratch is set.
    """
    rng = np.random.default_rng(config.seed)
    cloud = scene.cloud
    rounds = []
    carried = None  # (texture aligned with `cloud`, renderer) from last round
    for round_idx in range(config.iterations):
        positions, parents, std = _draw_candidates(cloud, config, rng)
        combined = PointCloud(
            positions=np.concatenate([cloud.positions, positions]),
            colors=None if cloud.colors is None else np.concatenate(
                [cloud.colors, cloud.colors[parents]]))
        staged = Scene(images=scene.images, cloud=combined, split=scene.split,
                       name=scene.name)
        init = None
        if carried is not None and not config.from_scratch:
            prev_texture, prev_renderer = carried
            seeded = NeuralTexture(len(combined), prev_texture.channels)
            with torch.no_grad():
                seeded.table[:len(cloud)] = prev_texture.table[:-1]
                seeded.table[-1] = prev_texture.table[-1]
            init = (seeded, prev_renderer)
        result = _verify_round(staged, len(cloud), config, train_config,
                               init=init)
        rounds.append({
            "round": round_idx,
            "n_candidates": len(parents),
            "std": std,
            "threshold": float(result.threshold),
            "parents": parents.tolist(),
            "kept": result.kept.tolist(),
            "n_kept": int(result.kept.sum()),
        })
        keep_rows = np.concatenate([np.ones(len(cloud), dtype=bool), result.kept])
        _, carried_texture = prune(combined, result.texture, keep_rows)
        carried = (carried_texture, result.renderer)
        cloud = result.cloud
    if out_ply is not None:
        save_ply(out_ply, cloud)
    if provenance_path is not None:
        doc = {"original_points": len(scene.cloud), "final_points": len(cloud),
               "seed": config.seed, "rounds": rounds}
        Path(provenance_path).write_text(json.dumps(doc, indent=1))
    return cloud
