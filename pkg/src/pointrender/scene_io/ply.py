"""Minimal PLY point-cloud I/O: ascii and binary_little_endian, xyz + optional rgb."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import DataError
from ..types import PointCloud

_PROP_DTYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_header(f) -> tuple[str, int, list[tuple[str, str]], int]:
    """Return (fmt, vertex_count, vertex_props, header_size)."""
    magic = f.readline()
    if magic.strip() != b"ply":
        raise DataError("not a PLY file (missing 'ply' magic)")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    while True:
        line = f.readline()
        if not line:
            raise DataError("truncated PLY header (no end_header)")
        tokens = line.decode("ascii", errors="replace").strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] not in ("ascii", "binary_little_endian"):
                raise DataError(f"unsupported PLY format {tokens[1]}")
            fmt = tokens[1]
        elif tokens[0] == "element":
            in_vertex = tokens[1] == "vertex"
            if in_vertex:
                count = int(tokens[2])
            elif int(tokens[2]) > 0:
                raise DataError(f"unsupported non-empty PLY element {tokens[1]}")
        elif tokens[0] == "property" and in_vertex:
            if tokens[1] == "list":
                raise DataError("list properties on vertex element are unsupported")
            if tokens[1] not in _PROP_DTYPES:
                raise DataError(f"unsupported PLY property type {tokens[1]}")
            props.append((tokens[2], _PROP_DTYPES[tokens[1]]))
        elif tokens[0] == "end_header":
            break
    if fmt is None or count is None:
        raise DataError("malformed PLY header (missing format or vertex element)")
    for axis in ("x", "y", "z"):
        if axis not in [name for name, _ in props]:
            raise DataError(f"PLY vertex element lacks '{axis}' property")
    return fmt, count, props, f.tell()


def load_ply(path: str | Path) -> PointCloud:
    path = Path(path)
    with open(path, "rb") as f:
        fmt, count, props, _ = _parse_header(f)
        dtype = np.dtype([(name, "<" + dt) for name, dt in props])
        if fmt == "binary_little_endian":
            raw = np.fromfile(f, dtype=dtype, count=count)
            if len(raw) != count:
                raise DataError(f"truncated PLY body in {path}")
        else:
            rows = []
            for _ in range(count):
                line = f.readline()
                if not line:
                    raise DataError(f"truncated PLY body in {path}")
                rows.append(tuple(line.split()[: len(props)]))
            raw = np.array(rows, dtype=dtype) if rows else np.empty(0, dtype=dtype)

    positions = np.stack([raw["x"], raw["y"], raw["z"]], axis=1) if count else \
        np.zeros((0, 3), dtype=np.float32)
    names = [name for name, _ in props]
    colors = None
    if all(c in names for c in ("red", "green", "blue")):
        rgb = np.stack([raw["red"], raw["green"], raw["blue"]], axis=1) if count else \
            np.zeros((0, 3))
        # integer colors are byte-scaled, float colors are taken as-is
        if raw.dtype["red"].kind in "ui":
            colors = rgb.astype(np.float32) / 255.0
        else:
            colors = rgb.astype(np.float32)
    return PointCloud(positions.astype(np.float32), colors)


def save_ply(path: str | Path, cloud: PointCloud, binary: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(cloud)
    has_color = cloud.colors is not None
    header = ["ply",
              f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")

    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if has_color:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(n, dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = (cloud.positions[:, i] for i in range(3))
    if has_color:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = (rgb[:, i] for i in range(3))

    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec.tofile(f)
        else:
            for row in rec:
                cols = [f"{row[name]:.9g}" for name in ("x", "y", "z")]
                if has_color:
                    cols += [str(int(row[name])) for name in ("red", "green", "blue")]
                f.write((" ".join(cols) + "\n").encode("ascii"))
