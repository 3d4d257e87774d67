"""Optional accelerated rasterizer loaded over a C ABI.

The shared library must reproduce the reference rasterizer bit for bit; the
loader only marshals buffers and validates the ABI version. The package works
fully without it.

The POINTRENDER_NATIVE_LIB environment variable, when set, names the only
library considered; otherwise raster_kernel/target/release relative to the
repository root is probed.
"""

from __future__ import annotations

import ctypes
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .rasterizer import _scaled_intrinsics
from .types import ENV_INDEX, CameraModel, Fragment, PointCloud, Pose

NATIVE_ENV = "POINTRENDER_NATIVE_LIB"
ABI_VERSION = 1

_STATUS_MESSAGES = {
    0: "ok",
    1: "null pointer argument",
    2: "invalid frame dimensions",
}


def _candidate_paths() -> list[Path]:
    env = os.environ.get(NATIVE_ENV)
    if env:
        # an explicit override is authoritative: a dangling path must not
        # silently load a different build from the default location
        return [Path(env)]
    suffix = ".dylib" if sys.platform == "darwin" else ".so"
    repo = Path(__file__).resolve().parents[2]
    return [repo / "raster_kernel" / "target" / "release"
            / f"libraster_kernel{suffix}"]


class NativeRaster:
    """ctypes wrapper over the accelerated z-buffer kernel."""

    def __init__(self, library_path: str | Path):
        self.path = Path(library_path)
        try:
            self._lib = ctypes.CDLL(str(self.path))
        except OSError as e:
            raise ConfigError(f"cannot load native rasterizer {self.path}: {e}") from e
        try:
            self._lib.rk_abi_version.restype = ctypes.c_uint32
            self._lib.rk_abi_version.argtypes = []
            version = self._lib.rk_abi_version()
        except AttributeError as e:
            raise ConfigError(
                f"{self.path} does not export rk_abi_version; not a rasterizer "
                f"kernel") from e
        if version != ABI_VERSION:
            raise ConfigError(
                f"native rasterizer speaks ABI {version}, this build needs "
                f"{ABI_VERSION}")
        f32p = np.ctypeslib.ndpointer(dtype=np.float32, flags="C_CONTIGUOUS")
        i32p = np.ctypeslib.ndpointer(dtype=np.int32, flags="C_CONTIGUOUS")
        self._lib.rk_rasterize_scale.restype = ctypes.c_int32
        self._lib.rk_rasterize_scale.argtypes = [
            f32p, ctypes.c_uint64,                       # positions, n_points
            f32p, f32p,                                  # rotation[9], translation[3]
            ctypes.c_float, ctypes.c_float,              # fx, fy (full resolution)
            ctypes.c_float, ctypes.c_float,              # cx, cy
            ctypes.c_uint32, ctypes.c_uint32,            # width, height
            ctypes.c_uint32,                             # scale
            ctypes.c_float,                              # z_near
            i32p, f32p,                                  # index_out, depth_out
        ]

    def rasterize_scale(self, points: PointCloud, camera: CameraModel,
                        pose: Pose, scale: int = 0) -> Fragment:
        if scale < 0:
            raise DataError(f"scale must be non-negative, got {scale}")
        _, _, _, _, w, h = _scaled_intrinsics(camera, scale)
        rotation = np.ascontiguousarray(pose.rotation, dtype=np.float32).ravel()
        translation = np.ascontiguousarray(pose.translation, dtype=np.float32)
        index = np.full((h, w), ENV_INDEX, dtype=np.int32)
        depth = np.zeros((h, w), dtype=np.float32)
        status = self._lib.rk_rasterize_scale(
            points.positions, len(points), rotation, translation,
            np.float32(camera.fx), np.float32(camera.fy),
            np.float32(camera.cx), np.float32(camera.cy),
            camera.width, camera.height, scale, np.float32(1e-4),
            index.ravel(), depth.ravel())
        if status != 0:
            raise DataError(
                f"native rasterizer failed: "
                f"{_STATUS_MESSAGES.get(status, f'status {status}')}")
        return Fragment(scale=scale, index_map=index, depth_map=depth)

    def rasterize_pyramid(self, points: PointCloud, camera: CameraModel,
                          pose: Pose, num_scales: int = 4) -> list[Fragment]:
        if num_scales < 1:
            raise DataError(f"num_scales must be at least 1, got {num_scales}")
        return [self.rasterize_scale(points, camera, pose, s)
                for s in range(num_scales)]


def load_native(required: bool = False) -> NativeRaster | None:
    """The accelerated kernel if a library is present, else None.

    required=True turns absence into an error instead.
    """
    for path in _candidate_paths():
        if path.is_file():
            return NativeRaster(path)
    if required:
        raise ConfigError(
            f"no native rasterizer found; set {NATIVE_ENV} or build "
            f"raster_kernel with cargo build --release")
    return None
