"""Exception types shared across the package."""


class VidynError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VidynError):
    """An array had a shape incompatible with the requested operation."""


class NonFiniteError(VidynError):
    """A NaN or Inf appeared where only finite values are valid."""


class DegenerateMapError(VidynError):
    """An attention map was identically zero, so its center of mass is undefined."""


class BoundaryFrameError(VidynError):
    """A frame-difference velocity was requested where a neighbor frame is missing."""


class DatasetFormatError(VidynError):
    """A dataset or checkpoint file failed magic/version/length validation."""


class UnsupportedVariantError(VidynError):
    """An operation requires a model variant other than the one loaded."""


class DivergedError(VidynError):
    """Training produced a non-finite loss and cannot continue."""
