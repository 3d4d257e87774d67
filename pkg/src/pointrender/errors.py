"""Exception hierarchy mapped to CLI exit codes."""


class PointRenderError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1
    code = "E_INTERNAL"


class ConfigError(PointRenderError):
    """Invalid configuration, arguments, or architecture mismatch."""

    exit_code = 2
    code = "E_CONFIG"


class DataError(PointRenderError):
    """Malformed or missing scene data (models, images, point clouds)."""

    exit_code = 3
    code = "E_DATA"


class AssetError(DataError):
    """A required external weights asset is missing or corrupt."""

    code = "E_ASSET"


class NumericError(PointRenderError):
    """Non-finite values or numerically unusable state during optimization."""

    exit_code = 4
    code = "E_NUMERIC"
