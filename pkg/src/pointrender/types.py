"""Core domain types shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import ConfigError, DataError

# Sentinel index for pixels covered by no point.
ENV_INDEX = -1


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics in pixel units.

    The principal point of a sensor camera lies inside the frame; cameras
    derived by cropping may carry it outside, so bounds are checked where
    calibrations enter from data, not here.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (isinstance(self.width, int) and isinstance(self.height, int)):
            object.__setattr__(self, "width", int(self.width))
            object.__setattr__(self, "height", int(self.height))
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"sensor size must be positive, got {self.width}x{self.height}")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ConfigError(f"principal point ({self.cx}, {self.cy}) must be finite")

    def principal_point_inside(self) -> bool:
        return 0 <= self.cx < self.width and 0 <= self.cy < self.height


@dataclass
class Pose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise DataError(f"rotation is not orthonormal (max deviation {err:.3g})")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise DataError("rotation must have determinant +1 (no reflections)")


class PosedImage:
    """An RGB image with its camera and pose. Pixels load lazily when backed by a file."""

    def __init__(self, id: int, camera: CameraModel, pose: Pose,
                 image: np.ndarray | None = None, image_path: str | Path | None = None):
        if image is None and image_path is None:
            raise DataError(f"posed image {id} has neither pixel data nor a file path")
        self.id = int(id)
        self.camera = camera
        self.pose = pose
        self.image_path = Path(image_path) if image_path is not None else None
        self._image = None
        if image is not None:
            self._image = self._check(np.asarray(image))

    def _check(self, arr: np.ndarray) -> np.ndarray:
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise DataError(f"image {self.id} must be HxWx3, got shape {arr.shape}")
        h, w = arr.shape[:2]
        if h != self.camera.height or w != self.camera.width:
            raise DataError(
                f"image {self.id} is {w}x{h} but camera says {self.camera.width}x{self.camera.height}"
            )
        return np.clip(arr.astype(np.float32), 0.0, 1.0)

    @property
    def image(self) -> np.ndarray:
        """HxWx3 float32 pixels in [0, 1]; loaded from disk on first access."""
        if self._image is None:
            with PILImage.open(self.image_path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            self._image = self._check(arr)
        return self._image


@dataclass
class PointCloud:
    """N world-space points, float32, with optional per-point colors in [0, 1]."""

    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise DataError(f"positions must be N×3, got shape {self.positions.shape}")
        if not np.isfinite(self.positions).all():
            raise DataError("point cloud contains non-finite coordinates")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
            if self.colors.shape != self.positions.shape:
                raise DataError("colors and positions disagree on point count")

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test partition of image ids."""

    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "train_ids", tuple(int(i) for i in self.train_ids))
        object.__setattr__(self, "test_ids", tuple(int(i) for i in self.test_ids))
        if set(self.train_ids) & set(self.test_ids):
            raise ConfigError("train and test ids overlap")


@dataclass
class Fragment:
    """Per-pixel winner of hard z-buffering at one pyramid scale.

    index_map holds point indices, or ENV_INDEX where no point landed.
    depth_map holds the winner's camera-space depth (0 where index is ENV_INDEX).
    """

    scale: int
    index_map: np.ndarray
    depth_map: np.ndarray

    def __post_init__(self):
        self.index_map = np.ascontiguousarray(self.index_map, dtype=np.int32)
        self.depth_map = np.ascontiguousarray(self.depth_map, dtype=np.float32)
        if self.index_map.shape != self.depth_map.shape:
            raise DataError("index and depth maps must share a shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.index_map.shape
