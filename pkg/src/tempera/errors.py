"""Exception types shared across the package."""


class TemperaError(Exception):
    """Base class for all package errors."""


class GeometryError(TemperaError, ValueError):
    """Invalid or mismatched physical geometry (spacing, origin, direction, affine)."""


class ShapeError(TemperaError, ValueError):
    """Array extents incompatible with the requested operation."""


class VolumeIOError(TemperaError, OSError):
    """A volume file is missing, unreadable or carries an invalid header field."""


class DetectionError(TemperaError):
    """Heart ROI detection failed (e.g. no edges to vote with)."""


class DivergenceError(TemperaError, FloatingPointError):
    """Training produced a non-finite gradient."""


class ConfigError(TemperaError, ValueError):
    """Invalid configuration or unusable dataset."""


class MissingArtifactError(TemperaError, FileNotFoundError):
    """An upstream pipeline artifact does not exist."""
