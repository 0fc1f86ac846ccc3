"""Canopy height model from height-normalized first returns."""

from __future__ import annotations

import numpy as np

from crownlabel.errors import InputError
from crownlabel.pointcloud import PointCloud
from crownlabel.raster import DEFAULT_NODATA, Raster, grid_for_bounds

DEFAULT_CELL_SIZE = 0.5
DEFAULT_CHANNELS = (1, 2)


def rasterize_chm(pc: PointCloud, cell_size: float = DEFAULT_CELL_SIZE,
                  channels=DEFAULT_CHANNELS) -> Raster:
    """Per-cell maximum height of first returns from the selected channels.

    ``pc`` must already be height-normalized. Cells without a qualifying
    return are nodata.
    """
    channels = sorted(set(int(c) for c in channels))
    if not channels:
        raise InputError("channel set must not be empty")
    gt, width, height = grid_for_bounds(pc.bounds, cell_size)
    keep = (pc.return_number == 1) & np.isin(pc.channel, channels)
    grid = np.full(width * height, -np.inf)
    if keep.any():
        rows, cols = gt.cell_of(pc.x[keep], pc.y[keep])
        np.maximum.at(grid, rows * width + cols, pc.z[keep])
    grid = np.where(np.isfinite(grid), grid, DEFAULT_NODATA).reshape(height, width)
    return Raster(grid, gt, DEFAULT_NODATA)


def fill_chm_gaps(chm: Raster) -> Raster:
    """Patch nodata holes.

    A nodata cell with at least 5 valid 8-neighbors takes their median; any
    other nodata cell becomes 0 (treated as open ground). Decisions use the
    input state only, so the result does not depend on scan order.
    """
    band = chm.band(0).astype(np.float64)
    valid = chm.valid(0)
    if valid.all():
        return chm
    h, w = band.shape
    padded = np.pad(np.where(valid, band, np.nan), 1, constant_values=np.nan)
    stack = np.stack([
        padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
        for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)
    ])
    n_valid = np.isfinite(stack).sum(axis=0)
    out = band.copy()
    holes = ~valid
    use_median = holes & (n_valid >= 5)
    if use_median.any():
        out[use_median] = np.nanmedian(stack[:, use_median], axis=0)
    out[holes & ~use_median] = 0.0
    return chm.with_values(out)
