"""Point-based neural re-rendering: learnable per-point features plus a CNN renderer."""

from .errors import (
    AssetError,
    ConfigError,
    DataError,
    NumericError,
    PointRenderError,
)
from .types import ENV_INDEX, CameraModel, Fragment, PointCloud, Pose, PosedImage, SplitSpec

__version__ = "0.1.0"

__all__ = [
    "ENV_INDEX", "AssetError", "CameraModel", "ConfigError", "DataError",
    "Fragment", "NumericError", "PointCloud", "PointRenderError", "Pose",
    "PosedImage", "SplitSpec", "__version__",
]
