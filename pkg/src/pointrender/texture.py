"""Learnable per-point feature texture, its environment vector, and fragment gather.

The texture is one (N+1)×C parameter table: row i < N belongs to point i and
the last row is the environment feature used for pixels no point covers. One
table keeps the env vector on the same optimization path as every other row.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataError
from .types import ENV_INDEX, Fragment, PointCloud
from .scene_io.ply import load_ply, save_ply

_CHECKPOINT_VERSION = 1


class NeuralTexture(nn.Module):
    """(N+1)×C feature table; the trailing row is the environment feature."""

    def __init__(self, n_points: int, channels: int = 8):
        super().__init__()
        if n_points < 1:
            raise DataError("texture needs at least one point (empty scene is unrenderable)")
        if channels < 1:
            raise DataError(f"channel count must be positive, got {channels}")
        self.n_points = n_points
        self.channels = channels
        self.table = nn.Parameter(torch.zeros(n_points + 1, channels))

    @property
    def features(self) -> torch.Tensor:
        """N×C per-point rows (differentiable view)."""
        return self.table[:-1]

    @property
    def env(self) -> torch.Tensor:
        """1×C environment feature (differentiable view)."""
        return self.table[-1:]


def init_texture(n_points: int, channels: int = 8) -> NeuralTexture:
    """All-zero texture; the renderer's biases break the symmetry during training."""
    return NeuralTexture(n_points, channels)


def gather(texture: NeuralTexture, fragment: Fragment,
           sparse: bool = False) -> torch.Tensor:
    """Index the texture with a fragment, producing an H×W×C feature grid.

    Empty pixels read the environment row. Differentiable: each texture row
    accumulates the gradients of every pixel that references it. With
    sparse=True the backward pass produces a sparse gradient (for SparseAdam).
    """
    index = np.asarray(fragment.index_map)
    if index.size and index.max() >= texture.n_points:
        raise DataError(
            f"fragment references point {int(index.max())} but texture has "
            f"{texture.n_points} rows (texture/cloud desync)")
    if index.size and index.min() < ENV_INDEX:
        raise DataError(f"fragment contains invalid index {int(index.min())}")
    idx = torch.from_numpy(np.ascontiguousarray(index)).long()
    idx = torch.where(idx == ENV_INDEX, torch.full_like(idx, texture.n_points), idx)
    return F.embedding(idx, texture.table, sparse=sparse)


def pseudo_density(texture: NeuralTexture) -> torch.Tensor:
    """Per-point existence score: the L1 mass of each feature row."""
    return texture.features.detach().abs().sum(dim=1)


def prune(cloud: PointCloud, texture: NeuralTexture, keep_mask: np.ndarray,
          ) -> tuple[PointCloud, NeuralTexture]:
    """Drop points and their texture rows together; env is untouched.

    Surviving rows keep their relative order. Fragments rasterized before the
    prune are stale; remap their indices with remap_indices.
    """
    keep = np.asarray(keep_mask, dtype=bool)
    if keep.shape != (len(cloud),):
        raise DataError(f"keep mask has shape {keep.shape}, cloud has {len(cloud)} points")
    if len(cloud) != texture.n_points:
        raise DataError("cloud and texture disagree on point count")
    if not keep.any():
        raise DataError("prune would remove every point")

    new_cloud = PointCloud(cloud.positions[keep],
                           None if cloud.colors is None else cloud.colors[keep])
    new_tex = NeuralTexture(int(keep.sum()), texture.channels)
    with torch.no_grad():
        kept = torch.from_numpy(np.nonzero(keep)[0])
        new_tex.table[:-1] = texture.table[kept]
        new_tex.table[-1] = texture.table[-1]
    return new_cloud, new_tex


def remap_indices(index_map: np.ndarray, keep_mask: np.ndarray) -> np.ndarray:
    """Rewrite fragment indices after a prune; pixels of dropped points go to ENV."""
    keep = np.asarray(keep_mask, dtype=bool)
    new_id = np.cumsum(keep) - 1
    out = np.full_like(index_map, ENV_INDEX)
    hit = index_map >= 0
    src = index_map[hit]
    kept = keep[src]
    remapped = np.where(kept, new_id[src], ENV_INDEX)
    out[hit] = remapped.astype(index_map.dtype)
    return out


# ---------------------------------------------------------------------------
# checkpointing: directory with the cloud, the feature rows, and the env row

def save_texture(out_dir: str | Path, cloud: PointCloud, texture: NeuralTexture) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(cloud) != texture.n_points:
        raise DataError("cloud and texture disagree on point count")
    save_ply(out_dir / "points.ply", cloud)
    table = texture.table.detach().cpu().numpy()
    np.save(out_dir / "features.npy", table[:-1])
    np.save(out_dir / "env.npy", table[-1:])
    meta = {"version": _CHECKPOINT_VERSION, "n_points": texture.n_points,
            "channels": texture.channels}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))


def load_texture(in_dir: str | Path) -> tuple[PointCloud, NeuralTexture]:
    in_dir = Path(in_dir)
    meta_path = in_dir / "meta.json"
    if not meta_path.exists():
        raise DataError(f"not a texture checkpoint: {meta_path} missing")
    meta = json.loads(meta_path.read_text())
    if meta.get("version") != _CHECKPOINT_VERSION:
        raise DataError(f"unsupported texture checkpoint version {meta.get('version')}")
    cloud = load_ply(in_dir / "points.ply")
    features = np.load(in_dir / "features.npy")
    env = np.load(in_dir / "env.npy")
    if features.shape != (meta["n_points"], meta["channels"]) or len(cloud) != meta["n_points"]:
        raise DataError(f"texture checkpoint {in_dir} is internally inconsistent")
    texture = NeuralTexture(meta["n_points"], meta["channels"])
    with torch.no_grad():
        texture.table[:-1] = torch.from_numpy(features)
        texture.table[-1:] = torch.from_numpy(env)
    return cloud, texture
