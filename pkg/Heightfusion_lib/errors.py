# Heightfusion_lib/errors.py
"""
Exception hierarchy shared by every Heightfusion module.
The CLI maps ConfigError to exit code 2 and every other HeightfusionError to 3.
"""


class HeightfusionError(Exception):
    """Base class for all expected, data-level failures."""
    pass


class ConfigError(HeightfusionError):
    """Raised for unknown config keys, bad values and invalid variant/scale combinations."""
    pass


class ShapeError(HeightfusionError):
    """Raised when tensor or raster extents do not line up."""
    pass


class GraphError(HeightfusionError):
    """Raised for invalid backward roots and missing gradients."""
    pass


class RasterFormatError(HeightfusionError):
    """Raised when a TIFF uses a feature outside the supported subset."""

    def __init__(self, message, tag=None):
        super().__init__(message)
        self.tag = tag


class TruncatedFileError(HeightfusionError):
    pass


class ModalityError(HeightfusionError):
    """Raised when a model receives a modality it does not take, or lacks one it needs."""
    pass


class CheckpointError(HeightfusionError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class MetricError(HeightfusionError):
    """Raised for undefined metrics, out-of-range inputs and malformed annotation files."""
    pass


class PlacementError(HeightfusionError):
    pass
