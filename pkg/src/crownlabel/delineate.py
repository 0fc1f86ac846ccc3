"""Treetop detection and marker-controlled watershed crown segmentation."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from crownlabel.errors import InputError
from crownlabel.labelset import InstanceMask
from crownlabel.raster import Geotransform, Raster, gaussian_smooth, snap_floor

DEFAULT_SIGMA = 1.0
DEFAULT_MIN_HEIGHT = 2.0
DEFAULT_WIN_A = 1.0
DEFAULT_WIN_B = 0.05

# N, W, E, S; fixed so that the flood is reproducible
_NEIGHBORS4 = ((-1, 0), (0, -1), (0, 1), (1, 0))


@dataclass(frozen=True, order=True)
class Treetop:
    r: int
    c: int
    height: float = field(compare=False)


@dataclass
class SegmentMap:
    """Crown labels over the CHM grid (0 is background)."""

    labels: np.ndarray
    geotransform: Geotransform
    top_of: dict[int, Treetop]

    @property
    def count(self) -> int:
        return len(self.top_of)


def window_radius_cells(height, cell_size: float, win_a: float = DEFAULT_WIN_A,
                        win_b: float = DEFAULT_WIN_B):
    """Search radius ``win_a + win_b * height`` meters, rounded up to whole cells."""
    meters = win_a + win_b * np.asarray(height, dtype=float)
    return -snap_floor(-meters / cell_size)


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    r = int(radius)
    return [(dr, dc) for dr in range(-r, r + 1) for dc in range(-r, r + 1) if dr * dr + dc * dc <= r * r]


def _disk_max(values: np.ndarray, radius: int) -> np.ndarray:
    h, w = values.shape
    p = np.pad(values, radius, constant_values=-np.inf)
    out = np.full(values.shape, -np.inf)
    for dr, dc in disk_offsets(radius):
        np.maximum(out, p[radius + dr:radius + dr + h, radius + dc:radius + dc + w], out=out)
    return out


def _require_band(chm_s: Raster) -> np.ndarray:
    values = chm_s.band(0).astype(np.float64)
    if not chm_s.valid(0).all():
        raise InputError("smoothed CHM must not contain nodata; fill gaps first")
    return values


def local_maxima(chm_s: Raster, min_tree_height: float = DEFAULT_MIN_HEIGHT,
                 win_a: float = DEFAULT_WIN_A, win_b: float = DEFAULT_WIN_B) -> list[Treetop]:
    """Variable-window local maxima of a smoothed CHM.

    A cell qualifies when it reaches ``min_tree_height`` and no cell within
    its height-dependent disk is higher. Qualifying cells that form a
    4-connected equal-height plateau are reduced to their smallest ``(r, c)``.
    Returned sorted by ``(r, c)``.
    """
    values = _require_band(chm_s)
    radius = window_radius_cells(values, chm_s.geotransform.cell_size, win_a, win_b)
    tall = values >= min_tree_height
    is_max = np.zeros(values.shape, dtype=bool)
    for rad in np.unique(radius[tall]):
        sel = tall & (radius == rad)
        is_max |= sel & (values >= _disk_max(values, int(rad)))

    cand = set(zip(*(a.tolist() for a in np.nonzero(is_max))))
    tops = []
    seen: set[tuple[int, int]] = set()
    for cell in sorted(cand):
        if cell in seen:
            continue
        # the sorted scan reaches each plateau first at its smallest cell
        seen.add(cell)
        v = values[cell]
        stack = [cell]
        while stack:
            r, c = stack.pop()
            for dr, dc in _NEIGHBORS4:
                nb = (r + dr, c + dc)
                if nb in cand and nb not in seen and values[nb] == v:
                    seen.add(nb)
                    stack.append(nb)
        tops.append(Treetop(cell[0], cell[1], float(v)))
    return tops


def marker_watershed(chm_s: Raster, markers, min_tree_height: float = DEFAULT_MIN_HEIGHT) -> SegmentMap:
    """Grow one crown per marker by priority flooding from the top down.

    Markers are labelled 1..n in ``(r, c)`` order, so the input order does not
    matter. The highest frontier cell is taken next (first-enqueued wins on
    ties) and inherits the label of the neighbor that enqueued it. Cells below
    ``min_tree_height`` are never entered.
    """
    values = _require_band(chm_s)
    h, w = values.shape
    markers = sorted(markers)
    cells = [(m.r, m.c) for m in markers]
    if len(set(cells)) != len(cells):
        raise InputError("duplicate marker cells")
    labels = np.zeros((h, w), dtype=np.int32)
    top_of: dict[int, Treetop] = {}
    for k, m in enumerate(markers, start=1):
        if not (0 <= m.r < h and 0 <= m.c < w):
            raise InputError(f"marker ({m.r}, {m.c}) lies outside the CHM")
        if values[m.r, m.c] < min_tree_height:
            raise InputError(f"marker ({m.r}, {m.c}) is below min_tree_height")
        labels[m.r, m.c] = k
        top_of[k] = m

    open_ = values >= min_tree_height
    heap: list[tuple[float, int, int, int, int]] = []
    seq = 0

    def push_neighbors(r, c, label):
        nonlocal seq
        for dr, dc in _NEIGHBORS4:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and open_[rr, cc] and labels[rr, cc] == 0:
                heapq.heappush(heap, (-values[rr, cc], seq, rr, cc, label))
                seq += 1

    for k, m in enumerate(markers, start=1):
        push_neighbors(m.r, m.c, k)
    while heap:
        _, _, r, c, label = heapq.heappop(heap)
        if labels[r, c]:
            continue
        labels[r, c] = label
        push_neighbors(r, c, label)
    return SegmentMap(labels, chm_s.geotransform, top_of)


def segments_to_instances(sm: SegmentMap) -> list[InstanceMask]:
    """One instance per nonzero label, in label order, in CHM pixel coordinates."""
    out = []
    for label, sl in enumerate(ndimage.find_objects(sm.labels), start=1):
        if sl is None:
            continue
        mask = sm.labels[sl] == label
        top = sm.top_of.get(label)
        out.append(InstanceMask.from_array(mask, label, (sl[1].start, sl[0].start),
                                           height=None if top is None else top.height))
    return out


def delineate(chm: Raster, sigma: float = DEFAULT_SIGMA, min_tree_height: float = DEFAULT_MIN_HEIGHT,
              win_a: float = DEFAULT_WIN_A, win_b: float = DEFAULT_WIN_B) -> tuple[SegmentMap, Raster]:
    """Smooth, detect treetops and flood. Returns the segments and the smoothed CHM."""
    smoothed = gaussian_smooth(chm, sigma)
    tops = local_maxima(smoothed, min_tree_height, win_a, win_b)
    return marker_watershed(smoothed, tops, min_tree_height), smoothed
