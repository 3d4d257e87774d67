"""Readers and writers for COLMAP sparse model directories (text and binary)."""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from ..types import CameraModel, PointCloud, Pose, PosedImage

log = logging.getLogger(__name__)

# model_name -> parameter layout; only pinhole variants are renderable here.
PINHOLE_MODELS = {
    "SIMPLE_PINHOLE": ("f", "cx", "cy"),
    "PINHOLE": ("fx", "fy", "cx", "cy"),
}
MODEL_IDS = {"SIMPLE_PINHOLE": 0, "PINHOLE": 1}
MODEL_NAMES = {v: k for k, v in MODEL_IDS.items()}
# Non-pinhole ids we can at least name in error messages.
KNOWN_MODEL_NAMES = {
    2: "SIMPLE_RADIAL", 3: "RADIAL", 4: "OPENCV", 5: "OPENCV_FISHEYE",
    6: "FULL_OPENCV", 7: "FOV", 8: "SIMPLE_RADIAL_FISHEYE",
    9: "RADIAL_FISHEYE", 10: "THIN_PRISM_FISHEYE",
}
MODEL_NUM_PARAMS = {0: 3, 1: 4, 2: 4, 3: 5, 4: 8, 5: 8, 6: 12, 7: 5, 8: 4, 9: 5, 10: 12}


def qvec_to_rotmat(qvec: np.ndarray) -> np.ndarray:
    w, x, y, z = qvec
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * z * x + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * z * x - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def rotmat_to_qvec(R: np.ndarray) -> np.ndarray:
    Rxx, Ryx, Rzx, Rxy, Ryy, Rzy, Rxz, Ryz, Rzz = R.flat
    K = np.array([
        [Rxx - Ryy - Rzz, 0, 0, 0],
        [Ryx + Rxy, Ryy - Rxx - Rzz, 0, 0],
        [Rzx + Rxz, Rzy + Ryz, Rzz - Rxx - Ryy, 0],
        [Ryz - Rzy, Rzx - Rxz, Rxy - Ryx, Rxx + Ryy + Rzz],
    ]) / 3.0
    eigvals, eigvecs = np.linalg.eigh(K)
    qvec = eigvecs[[3, 0, 1, 2], np.argmax(eigvals)]
    if qvec[0] < 0:
        qvec *= -1
    return qvec


def _read_bytes(fid, num_bytes: int, fmt: str):
    data = fid.read(num_bytes)
    if len(data) != num_bytes:
        raise DataError(f"truncated binary model file {getattr(fid, 'name', '?')}")
    return struct.unpack("<" + fmt, data)


def _camera_from_params(camera_id: int, model: str, width: int, height: int,
                        params: np.ndarray) -> CameraModel:
    if model not in PINHOLE_MODELS:
        raise DataError(
            f"camera {camera_id} uses unsupported (non-pinhole) model {model}"
        )
    if model == "SIMPLE_PINHOLE":
        f, cx, cy = params
        fx = fy = f
    else:
        fx, fy, cx, cy = params
    cam = CameraModel(fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy),
                      width=int(width), height=int(height))
    if not cam.principal_point_inside():
        raise DataError(
            f"camera {camera_id}: principal point ({cam.cx}, {cam.cy}) outside "
            f"sensor {cam.width}x{cam.height}")
    return cam


# ---------------------------------------------------------------------------
# text format

def read_cameras_text(path: Path) -> dict[int, CameraModel]:
    cameras = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read camera file {path}: {e}") from e
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        try:
            camera_id = int(elems[0])
            model = elems[1]
            width, height = int(elems[2]), int(elems[3])
            params = np.array([float(v) for v in elems[4:]])
        except (ValueError, IndexError) as e:
            raise DataError(f"malformed camera line in {path}: {line!r}") from e
        cameras[camera_id] = _camera_from_params(camera_id, model, width, height, params)
    return cameras


def read_images_text(path: Path) -> dict[int, tuple[np.ndarray, np.ndarray, int, str]]:
    """Return image_id -> (qvec, tvec, camera_id, name)."""
    images = {}
    try:
        lines = iter(path.read_text().splitlines())
    except OSError as e:
        raise DataError(f"cannot read image file {path}: {e}") from e
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        try:
            image_id = int(elems[0])
            qvec = np.array([float(v) for v in elems[1:5]])
            tvec = np.array([float(v) for v in elems[5:8]])
            camera_id = int(elems[8])
            name = elems[9]
        except (ValueError, IndexError) as e:
            raise DataError(f"malformed image line in {path}: {line!r}") from e
        next(lines, None)  # skip the POINTS2D line
        images[image_id] = (qvec, tvec, camera_id, name)
    return images


def read_points_text(path: Path) -> PointCloud:
    xyz, rgb = [], []
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read points file {path}: {e}") from e
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        elems = line.split()
        try:
            xyz.append([float(v) for v in elems[1:4]])
            rgb.append([int(v) for v in elems[4:7]])
        except (ValueError, IndexError) as e:
            raise DataError(f"malformed point line in {path}: {line!r}") from e
    if not xyz:
        return PointCloud(np.zeros((0, 3), dtype=np.float32))
    return PointCloud(np.array(xyz), np.array(rgb, dtype=np.float32) / 255.0)


# ---------------------------------------------------------------------------
# binary format

def read_cameras_binary(path: Path) -> dict[int, CameraModel]:
    cameras = {}
    with open(path, "rb") as fid:
        num_cameras = _read_bytes(fid, 8, "Q")[0]
        for _ in range(num_cameras):
            camera_id, model_id, width, height = _read_bytes(fid, 24, "iiQQ")
            if model_id not in MODEL_NUM_PARAMS:
                raise DataError(f"camera {camera_id} has unknown model id {model_id}")
            num_params = MODEL_NUM_PARAMS[model_id]
            params = np.array(_read_bytes(fid, 8 * num_params, "d" * num_params))
            model = MODEL_NAMES.get(model_id, KNOWN_MODEL_NAMES.get(model_id, str(model_id)))
            cameras[camera_id] = _camera_from_params(camera_id, model, width, height, params)
    return cameras


def read_images_binary(path: Path) -> dict[int, tuple[np.ndarray, np.ndarray, int, str]]:
    images = {}
    with open(path, "rb") as fid:
        num_images = _read_bytes(fid, 8, "Q")[0]
        for _ in range(num_images):
            props = _read_bytes(fid, 64, "idddddddi")
            image_id = props[0]
            qvec = np.array(props[1:5])
            tvec = np.array(props[5:8])
            camera_id = props[8]
            name_bytes = b""
            while True:
                c = fid.read(1)
                if not c:
                    raise DataError(f"truncated binary model file {path}")
                if c == b"\x00":
                    break
                name_bytes += c
            num_points2d = _read_bytes(fid, 8, "Q")[0]
            fid.seek(24 * num_points2d, 1)
            images[image_id] = (qvec, tvec, camera_id, name_bytes.decode("utf-8"))
    return images


def read_points_binary(path: Path) -> PointCloud:
    xyz, rgb = [], []
    with open(path, "rb") as fid:
        num_points = _read_bytes(fid, 8, "Q")[0]
        for _ in range(num_points):
            props = _read_bytes(fid, 43, "QdddBBBd")
            xyz.append(props[1:4])
            rgb.append(props[4:7])
            track_length = _read_bytes(fid, 8, "Q")[0]
            fid.seek(8 * track_length, 1)
    if not xyz:
        return PointCloud(np.zeros((0, 3), dtype=np.float32))
    return PointCloud(np.array(xyz), np.array(rgb, dtype=np.float32) / 255.0)


# ---------------------------------------------------------------------------
# model-level API

def _model_ext(model_dir: Path) -> str:
    """Pick the model flavor; binary wins when both are present."""
    model_dir = Path(model_dir)
    if (model_dir / "cameras.bin").exists():
        return ".bin"
    if (model_dir / "cameras.txt").exists():
        return ".txt"
    raise DataError(f"no COLMAP model (cameras.bin/cameras.txt) found in {model_dir}")


def load_colmap_model(model_dir: str | Path, image_dir: str | Path | None = None,
                      ) -> tuple[list[CameraModel], list[PosedImage], PointCloud]:
    """Load a COLMAP sparse model directory.

    Poses come back in world-to-camera convention. Posed images carry file paths
    (resolved against image_dir) and load pixels lazily; images whose file is
    missing on disk are dropped with a warning.
    """
    model_dir = Path(model_dir)
    ext = _model_ext(model_dir)
    for stem in ("cameras", "images", "points3D"):
        if not (model_dir / f"{stem}{ext}").exists():
            raise DataError(f"missing model file {model_dir / (stem + ext)}")
    if ext == ".bin":
        cameras = read_cameras_binary(model_dir / "cameras.bin")
        raw_images = read_images_binary(model_dir / "images.bin")
        cloud = read_points_binary(model_dir / "points3D.bin")
    else:
        cameras = read_cameras_text(model_dir / "cameras.txt")
        raw_images = read_images_text(model_dir / "images.txt")
        cloud = read_points_text(model_dir / "points3D.txt")

    if len(cloud) == 0:
        log.warning("model %s has an empty sparse point cloud", model_dir)

    posed = []
    for image_id in sorted(raw_images):
        qvec, tvec, camera_id, name = raw_images[image_id]
        if camera_id not in cameras:
            raise DataError(f"image {image_id} references unknown camera {camera_id}")
        pose = Pose(rotation=qvec_to_rotmat(qvec), translation=tvec)
        path = None
        if image_dir is not None:
            path = Path(image_dir) / name
            if not path.exists():
                log.warning("dropping image %s (%s): file not found", image_id, path)
                continue
        posed.append(PosedImage(id=image_id, camera=cameras[camera_id], pose=pose,
                                image_path=path if path is not None else Path(name)))
    return list(cameras.values()), posed, cloud


def save_colmap_model(model_dir: str | Path, cameras: dict[int, CameraModel],
                      images: dict[int, tuple[Pose, int, str]], cloud: PointCloud,
                      binary: bool = True) -> None:
    """Write a model directory. `images` maps image_id -> (pose, camera_id, name)."""
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    if binary:
        with open(model_dir / "cameras.bin", "wb") as f:
            f.write(struct.pack("<Q", len(cameras)))
            for cid, cam in sorted(cameras.items()):
                f.write(struct.pack("<iiQQ", cid, MODEL_IDS["PINHOLE"], cam.width, cam.height))
                f.write(struct.pack("<dddd", cam.fx, cam.fy, cam.cx, cam.cy))
        with open(model_dir / "images.bin", "wb") as f:
            f.write(struct.pack("<Q", len(images)))
            for iid, (pose, cid, name) in sorted(images.items()):
                q = rotmat_to_qvec(pose.rotation)
                f.write(struct.pack("<idddddddi", iid, *q, *pose.translation, cid))
                f.write(name.encode("utf-8") + b"\x00")
                f.write(struct.pack("<Q", 0))
        with open(model_dir / "points3D.bin", "wb") as f:
            f.write(struct.pack("<Q", len(cloud)))
            colors = cloud.colors
            for i in range(len(cloud)):
                rgb = (255, 255, 255) if colors is None else tuple(
                    int(round(c * 255)) for c in colors[i])
                f.write(struct.pack("<QdddBBBd", i + 1, *map(float, cloud.positions[i]),
                                    *rgb, 0.0))
                f.write(struct.pack("<Q", 0))
    else:
        with open(model_dir / "cameras.txt", "w") as f:
            f.write("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n")
            for cid, cam in sorted(cameras.items()):
                f.write(f"{cid} PINHOLE {cam.width} {cam.height} "
                        f"{cam.fx:.12g} {cam.fy:.12g} {cam.cx:.12g} {cam.cy:.12g}\n")
        with open(model_dir / "images.txt", "w") as f:
            f.write("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n")
            for iid, (pose, cid, name) in sorted(images.items()):
                q = rotmat_to_qvec(pose.rotation)
                t = pose.translation
                f.write(f"{iid} {q[0]:.17g} {q[1]:.17g} {q[2]:.17g} {q[3]:.17g} "
                        f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g} {cid} {name}\n\n")
        with open(model_dir / "points3D.txt", "w") as f:
            f.write("# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]\n")
            colors = cloud.colors
            for i in range(len(cloud)):
                rgb = (255, 255, 255) if colors is None else tuple(
                    int(round(c * 255)) for c in colors[i])
                p = cloud.positions[i]
                f.write(f"{i + 1} {p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
                        f"{rgb[0]} {rgb[1]} {rgb[2]} 0\n")
