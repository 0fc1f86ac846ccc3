"""Vegetation index and index-based filtering of coarse crown segments."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from crownlabel.errors import InputError
from crownlabel.labelset import InstanceMask, footprint
from crownlabel.raster import Geotransform, Raster

DEFAULT_NDVI_THRESHOLD = 0.2
NO_VALID_PIXELS = -math.inf


@dataclass(frozen=True)
class BandSet:
    """Band indices of a five-band orthophoto (475/560/668/717/842 nm by default)."""

    blue: int = 0
    green: int = 1
    red: int = 2
    red_edge: int = 3
    nir: int = 4

    def validate(self, band_count: int) -> None:
        idx = list(asdict(self).values())
        if len(set(idx)) != len(idx):
            raise InputError(f"band indices must be distinct: {idx}")
        if min(idx) < 0 or max(idx) >= band_count:
            raise InputError(f"band indices {idx} out of range for a {band_count}-band raster")

    @classmethod
    def from_json(cls, path) -> "BandSet":
        p = Path(path)
        if not p.exists():
            raise InputError(f"band config not found: {p}")
        try:
            d = json.loads(p.read_text())
            return cls(**{k: int(v) for k, v in d.items()})
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise InputError(f"{p}: bad band config: {exc}") from None


def compute_ndvi(ortho: Raster, bands: BandSet = BandSet()) -> Raster:
    """Red-edge/red normalized difference, ``(RE - Red) / (RE + Red)``.

    Pixels where either band is nodata or the denominator is zero are nodata.
    """
    bands.validate(ortho.bands)
    re = ortho.band(bands.red_edge).astype(np.float64)
    red = ortho.band(bands.red).astype(np.float64)
    den = re + red
    ok = ortho.valid(bands.red_edge) & ortho.valid(bands.red) & (den != 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ndvi = np.where(ok, (re - red) / np.where(ok, den, 1.0), ortho.nodata)
    # guards the [-1, 1] range when a band is negative (e.g. bad calibration)
    ndvi = np.where(ok, np.clip(ndvi, -1.0, 1.0), ortho.nodata)
    return Raster(ndvi, ortho.geotransform, ortho.nodata)


def segment_mean_index(instances: Iterable[InstanceMask], chm_gt: Geotransform,
                       index: Raster) -> dict[int, float]:
    """Mean index value over the ortho pixels that fall in each CHM-grid segment.

    Nodata pixels and pixels outside ``index`` are skipped; a segment with no
    valid pixel maps to ``-inf`` so any threshold discards it.
    """
    band = index.band(0)
    valid = index.valid(0)
    H, W = band.shape
    means = {}
    for inst in instances:
        row0, col0, bits = footprint(inst, chm_gt, index.geotransform)
        h, w = bits.shape
        r0, c0 = max(row0, 0), max(col0, 0)
        r1, c1 = min(row0 + h, H), min(col0 + w, W)
        if r0 >= r1 or c0 >= c1:
            means[inst.id] = NO_VALID_PIXELS
            continue
        sel = bits[r0 - row0:r1 - row0, c0 - col0:c1 - col0] & valid[r0:r1, c0:c1]
        n = int(np.count_nonzero(sel))
        means[inst.id] = float(band[r0:r1, c0:c1][sel].mean()) if n else NO_VALID_PIXELS
    return means


def filter_by_ndvi(instances: Iterable[InstanceMask], means: Mapping[int, float],
                   threshold: float = DEFAULT_NDVI_THRESHOLD) -> list[InstanceMask]:
    """Keep instances whose mean index is at least ``threshold``, in input order."""
    kept = []
    for inst in instances:
        if inst.id not in means:
            raise InputError(f"no mean index for instance {inst.id}")
        if means[inst.id] >= threshold:
            kept.append(inst)
    return kept


def write_histogram_csv(means: Mapping[int, float], path) -> None:
    """One ``label,mean_ndvi`` row per segment, label order; empty field for no data."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "mean_ndvi"])
        for label in sorted(means):
            v = means[label]
            w.writerow([label, "" if v == NO_VALID_PIXELS else repr(v)])
