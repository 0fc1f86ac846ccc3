"""Lidar-derived tree crown pseudo-labels and instance-segmentation evaluation."""

from crownlabel.errors import (
    CrownLabelError,
    InputError,
    InvariantError,
    SegmenterError,
)
from crownlabel.raster import Geotransform, Raster, read_raster, write_raster

__version__ = "0.1.0"

__all__ = [
    "CrownLabelError",
    "Geotransform",
    "InputError",
    "InvariantError",
    "Raster",
    "SegmenterError",
    "read_raster",
    "write_raster",
]
