"""Hard z-buffer point rasterization at multiple scales.

This is the reference implementation of the rasterization contract. All
projection arithmetic is float32 with a pinned operation order so that an
accelerated native kernel can reproduce results bit for bit:

    x  = r00*x0 + r01*x1 + r02*x2 + t0        (left-associative f32)
    xz = x / z
    u  = fx_s * xz + cx_s                      (fx_s = fx / 2^s in f32)
    ui = floor(u + 0.5) if u >= 0 else ceil(u - 0.5)

Pixel ownership is resolved through a packed 64-bit key
(depth_bits << 32 | point_index) reduced by minimum, which encodes both the
smaller-depth rule and the smaller-index tie-break in one total order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .types import ENV_INDEX, CameraModel, Fragment, PointCloud, Pose

Z_NEAR = np.float32(1e-4)

_EMPTY_KEY = np.uint64(0xFFFFFFFFFFFFFFFF)
_FRAG_MAGIC = b"PRFG"


def _scaled_intrinsics(camera: CameraModel, scale: int,
                       ) -> tuple[np.float32, np.float32, np.float32, np.float32, int, int]:
    div = np.float32(float(1 << scale))
    fx = np.float32(camera.fx) / div
    fy = np.float32(camera.fy) / div
    cx = np.float32(camera.cx) / div
    cy = np.float32(camera.cy) / div
    w = -(-camera.width // (1 << scale))
    h = -(-camera.height // (1 << scale))
    return fx, fy, cx, cy, w, h


def _project_f32(positions: np.ndarray, pose: Pose,
                 fx: np.float32, fy: np.float32, cx: np.float32, cy: np.float32,
                 width: int, height: int,
                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (u, v, z, ui, vi_as_float, valid) in the pinned f32 order."""
    r = pose.rotation.astype(np.float32)
    t = pose.translation.astype(np.float32)
    x0, x1, x2 = positions[:, 0], positions[:, 1], positions[:, 2]

    x = r[0, 0] * x0 + r[0, 1] * x1 + r[0, 2] * x2 + t[0]
    y = r[1, 0] * x0 + r[1, 1] * x1 + r[1, 2] * x2 + t[1]
    z = r[2, 0] * x0 + r[2, 1] * x1 + r[2, 2] * x2 + t[2]

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        xz = x / z
        yz = y / z
        u = fx * xz + cx
        v = fy * yz + cy

        half = np.float32(0.5)
        ui = np.where(u >= 0, np.floor(u + half), np.ceil(u - half))
        vi = np.where(v >= 0, np.floor(v + half), np.ceil(v - half))

    # bounds are checked in float space so non-finite values never reach an int cast
    valid = ((z > Z_NEAR)
             & (ui >= np.float32(0)) & (ui < np.float32(width))
             & (vi >= np.float32(0)) & (vi < np.float32(height)))
    return u, v, z, ui, vi, valid


def project(points: PointCloud, camera: CameraModel, pose: Pose,
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project points into the image. Returns (uv N×2, depth N, valid N).

    Camera-space depth is z of R·X+t; uv are continuous pixel coordinates;
    a point is valid iff z > z_near and its rounded pixel is inside the frame.
    Index space is preserved: invalid points are masked, never dropped.
    """
    u, v, z, _, _, valid = _project_f32(
        points.positions, pose, np.float32(camera.fx), np.float32(camera.fy),
        np.float32(camera.cx), np.float32(camera.cy), camera.width, camera.height)
    return np.stack([u, v], axis=1), z, valid


def rasterize_scale(points: PointCloud, camera: CameraModel, pose: Pose,
                    scale: int = 0) -> Fragment:
    """Z-buffer the cloud at resolution ceil(H/2^s)×ceil(W/2^s).

    Each pixel holds the index of the nearest valid point rounding into it
    (ties to the smaller index) or the environment sentinel when empty.
    The result is independent of point traversal order.
    """
    if scale < 0:
        raise DataError(f"scale must be non-negative, got {scale}")
    fx, fy, cx, cy, w, h = _scaled_intrinsics(camera, scale)
    _, _, z, ui, vi, valid = _project_f32(points.positions, pose, fx, fy, cx, cy, w, h)

    idx = np.nonzero(valid)[0]
    keys = np.full(w * h, _EMPTY_KEY, dtype=np.uint64)
    if idx.size:
        px = ui[idx].astype(np.int64)
        py = vi[idx].astype(np.int64)
        flat = py * w + px
        # positive f32 bit patterns order like the floats they encode
        depth_bits = np.ascontiguousarray(z[idx]).view(np.uint32).astype(np.uint64)
        packed = (depth_bits << np.uint64(32)) | idx.astype(np.uint64)
        np.minimum.at(keys, flat, packed)

    empty = keys == _EMPTY_KEY
    index_map = (keys & np.uint64(0xFFFFFFFF)).astype(np.int64).astype(np.int32)
    index_map[empty] = ENV_INDEX
    depth_map = (keys >> np.uint64(32)).astype(np.uint32).view(np.float32).copy()
    depth_map[empty] = 0.0
    return Fragment(scale=scale,
                    index_map=index_map.reshape(h, w),
                    depth_map=depth_map.reshape(h, w))


def rasterize_pyramid(points: PointCloud, camera: CameraModel, pose: Pose,
                      num_scales: int = 4) -> list[Fragment]:
    """Fragments at scales 0..num_scales-1, full resolution first."""
    if num_scales < 1:
        raise DataError(f"num_scales must be at least 1, got {num_scales}")
    return [rasterize_scale(points, camera, pose, s) for s in range(num_scales)]


# ---------------------------------------------------------------------------
# debug dump format: magic, version, scale, height, width, index grid, depth grid

def save_fragment(path: str | Path, frag: Fragment) -> None:
    h, w = frag.shape
    with open(path, "wb") as f:
        f.write(_FRAG_MAGIC)
        f.write(struct.pack("<IIII", 1, frag.scale, h, w))
        f.write(np.ascontiguousarray(frag.index_map, dtype="<i4").tobytes())
        f.write(np.ascontiguousarray(frag.depth_map, dtype="<f4").tobytes())


def load_fragment(path: str | Path) -> Fragment:
    raw = Path(path).read_bytes()
    if raw[:4] != _FRAG_MAGIC:
        raise DataError(f"{path} is not a fragment dump (bad magic)")
    version, scale, h, w = struct.unpack_from("<IIII", raw, 4)
    if version != 1:
        raise DataError(f"unsupported fragment dump version {version}")
    need = 20 + h * w * 8
    if len(raw) < need:
        raise DataError(f"truncated fragment dump {path}")
    index = np.frombuffer(raw, dtype="<i4", count=h * w, offset=20).reshape(h, w)
    depth = np.frombuffer(raw, dtype="<f4", count=h * w, offset=20 + h * w * 4).reshape(h, w)
    return Fragment(scale=scale, index_map=index.copy(), depth_map=depth.copy())
