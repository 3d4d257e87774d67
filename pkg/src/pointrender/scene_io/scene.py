"""Scene assembly: manifests, train/test splits, and crop-adjusted cameras."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..errors import ConfigError, DataError
from ..types import CameraModel, PointCloud, PosedImage, SplitSpec
from .colmap import load_colmap_model
from .ply import load_ply

log = logging.getLogger(__name__)


def make_split(image_ids: list[int], k: int = 8) -> SplitSpec:
    """Hold out every k-th frame (the last of each block) by sorted position."""
    ids = sorted(image_ids)
    if len(ids) != len(set(ids)):
        raise ConfigError("image ids contain duplicates")
    if len(ids) < k:
        log.warning("only %d images (<%d): test split is empty", len(ids), k)
        return SplitSpec(train_ids=tuple(ids), test_ids=())
    test = [ids[p] for p in range(len(ids)) if p % k == k - 1]
    train = [i for i in ids if i not in set(test)]
    return SplitSpec(train_ids=tuple(train), test_ids=tuple(test))


def crop_camera(camera: CameraModel, origin: tuple[int, int],
                size: tuple[int, int]) -> CameraModel:
    """Camera for the (w,h) window at pixel origin (u0,v0): shift the principal point."""
    u0, v0 = origin
    w, h = size
    if w <= 0 or h <= 0:
        raise ConfigError(f"crop size must be positive, got {w}x{h}")
    if u0 < 0 or v0 < 0 or u0 + w > camera.width or v0 + h > camera.height:
        raise ConfigError(
            f"crop window {w}x{h}+{u0}+{v0} exceeds sensor bounds "
            f"{camera.width}x{camera.height}")
    return CameraModel(fx=camera.fx, fy=camera.fy,
                       cx=camera.cx - u0, cy=camera.cy - v0,
                       width=w, height=h)


@dataclass
class Scene:
    """A posed image collection plus the point cloud it was triangulated from."""

    images: list[PosedImage]
    cloud: PointCloud
    split: SplitSpec
    name: str = "scene"

    _by_id: dict[int, PosedImage] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_id = {im.id: im for im in self.images}
        known = set(self._by_id)
        for i in self.split.train_ids + self.split.test_ids:
            if i not in known:
                raise DataError(f"split references unknown image id {i}")

    def image(self, image_id: int) -> PosedImage:
        return self._by_id[image_id]

    @property
    def train_images(self) -> list[PosedImage]:
        return [self._by_id[i] for i in self.split.train_ids]

    @property
    def test_images(self) -> list[PosedImage]:
        return [self._by_id[i] for i in self.split.test_ids]


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read scene manifest {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed scene manifest {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"scene manifest {path} must be a key-value mapping")
    if "model_dir" not in raw:
        raise ConfigError(f"scene manifest {path} lacks required key 'model_dir'")
    return raw


def load_scene(manifest_path: str | Path) -> Scene:
    """Load a scene from a manifest file.

    Recognized keys: model_dir (COLMAP model), image_dir, point_cloud
    (optional PLY overriding the sparse triangulation), split_k (default 8),
    name.  Relative paths resolve against the manifest location.
    """
    manifest_path = Path(manifest_path)
    raw = load_manifest(manifest_path)
    base = manifest_path.parent

    def _resolve(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    model_dir = _resolve(raw["model_dir"])
    image_dir = _resolve(raw["image_dir"]) if "image_dir" in raw else None
    _, images, cloud = load_colmap_model(model_dir, image_dir)
    if "point_cloud" in raw:
        cloud = load_ply(_resolve(raw["point_cloud"]))
    if len(cloud) == 0:
        raise DataError(f"scene {manifest_path} has no points to render")
    if not images:
        raise DataError(f"scene {manifest_path} has no usable images")

    k = int(raw.get("split_k", 8))
    if k < 2:
        raise ConfigError(f"split_k must be at least 2, got {k}")
    split = make_split([im.id for im in images], k=k)
    return Scene(images=images, cloud=cloud, split=split,
                 name=str(raw.get("name", manifest_path.stem)))


def save_manifest(path: str | Path, model_dir: str, image_dir: str | None = None,
                  point_cloud: str | None = None, split_k: int = 8,
                  name: str | None = None) -> None:
    doc: dict = {"model_dir": model_dir, "split_k": split_k}
    if image_dir is not None:
        doc["image_dir"] = image_dir
    if point_cloud is not None:
        doc["point_cloud"] = point_cloud
    if name is not None:
        doc["name"] = name
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))
