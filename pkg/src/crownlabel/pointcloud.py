"""Lidar return ingestion, fallback ground classification, DTM and height normalization."""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, replace
from typing import Iterable, TextIO

import numpy as np

from crownlabel.errors import InputError
from crownlabel.raster import Raster, grid_for_bounds

COLUMNS = ("x", "y", "z", "return_number", "classification", "channel")


class Classification(enum.IntEnum):
    UNCLASSIFIED = 0
    GROUND = 1
    VEGETATION = 2
    BUILDING = 3
    NOISE = 4

    @classmethod
    def parse(cls, token: str) -> "Classification":
        try:
            return cls[token.strip().upper()]
        except KeyError:
            raise InputError(f"unknown classification token {token!r}") from None


@dataclass(frozen=True)
class PointCloud:
    """Column-oriented lidar returns.

    Each attribute is a 1-D array of equal length; ``classification`` holds
    :class:`Classification` codes.
    """

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    return_number: np.ndarray
    classification: np.ndarray
    channel: np.ndarray

    def __post_init__(self):
        n = len(self.x)
        for name in COLUMNS:
            if len(getattr(self, name)) != n:
                raise InputError("point cloud columns differ in length")
        if n == 0:
            raise InputError("empty point cloud")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all() and np.isfinite(self.z).all()):
            raise InputError("point coordinates must be finite")
        if (self.return_number < 1).any():
            raise InputError("return_number must be >= 1")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (float(self.x.min()), float(self.y.min()), float(self.x.max()), float(self.y.max()))

    @classmethod
    def from_arrays(cls, x, y, z, return_number=None, classification=None, channel=None) -> "PointCloud":
        x = np.asarray(x, dtype=float)
        n = len(x)
        return cls(
            x=x,
            y=np.asarray(y, dtype=float),
            z=np.asarray(z, dtype=float),
            return_number=np.ones(n, np.int64) if return_number is None
            else np.asarray(return_number, dtype=np.int64),
            classification=np.zeros(n, np.int64) if classification is None
            else np.asarray(classification, dtype=np.int64),
            channel=np.ones(n, np.int64) if channel is None else np.asarray(channel, dtype=np.int64),
        )


def parse_point_cloud(stream: TextIO | str | Iterable[str]) -> PointCloud:
    """Parse CSV text with header ``x,y,z,return_number,classification,channel``."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream)
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise InputError("empty point cloud") from None
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise InputError(f"point CSV missing columns: {', '.join(missing)}")
    idx = [header.index(c) for c in COLUMNS]

    cols: list[list] = [[] for _ in COLUMNS]
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not f.strip() for f in row):
            continue
        try:
            fields = [row[i] for i in idx]
        except IndexError:
            raise InputError(f"line {lineno}: expected {len(header)} fields, got {len(row)}") from None
        try:
            cols[0].append(float(fields[0]))
            cols[1].append(float(fields[1]))
            cols[2].append(float(fields[2]))
            cols[3].append(int(fields[3]))
            cols[5].append(int(fields[5]))
        except ValueError:
            raise InputError(f"line {lineno}: non-numeric value in {fields}") from None
        cols[4].append(int(Classification.parse(fields[4])))
    if not cols[0]:
        raise InputError("empty point cloud")
    pc = PointCloud(
        x=np.array(cols[0]), y=np.array(cols[1]), z=np.array(cols[2]),
        return_number=np.array(cols[3], dtype=np.int64),
        classification=np.array(cols[4], dtype=np.int64),
        channel=np.array(cols[5], dtype=np.int64),
    )
    return pc


def read_point_cloud(path) -> PointCloud:
    try:
        with open(path, newline="") as fh:
            return parse_point_cloud(fh)
    except FileNotFoundError:
        raise InputError(f"point cloud not found: {path}") from None


def write_point_cloud(pc: PointCloud, path) -> None:
    names = {int(c): c.name.lower() for c in Classification}
    with open(path, "w", newline="") as fh:
        fh.write(",".join(COLUMNS) + "\n")
        for i in range(len(pc)):
            fh.write(f"{pc.x[i]:.3f},{pc.y[i]:.3f},{pc.z[i]:.3f},{pc.return_number[i]},"
                     f"{names[int(pc.classification[i])]},{pc.channel[i]}\n")


def classify_ground_fallback(pc: PointCloud, grid: float = 1.0, tol: float = 0.2) -> PointCloud:
    """Mark unclassified points near their grid cell's lowest return as ground.

    A crude stand-in for a real ground filter: per ``grid``-sized cell, any
    unclassified point with ``z <= min_z + tol`` becomes ground. Points that
    already carry a class are never touched.
    """
    if grid <= 0 or tol < 0:
        raise InputError("grid must be > 0 and tol >= 0")
    gt, width, height = grid_for_bounds(pc.bounds, grid)
    rows, cols = gt.cell_of(pc.x, pc.y)
    cell = rows * width + cols
    cell_min = np.full(width * height, np.inf)
    np.minimum.at(cell_min, cell, pc.z)
    unclassified = pc.classification == Classification.UNCLASSIFIED
    to_ground = unclassified & (pc.z <= cell_min[cell] + tol)
    cls = np.where(to_ground, int(Classification.GROUND), pc.classification)
    return replace(pc, classification=cls)


def _neighbor_fill(values: np.ndarray, valid: np.ndarray, max_passes: int) -> np.ndarray:
    """Fill invalid cells with the mean of their valid 3x3 neighbors, repeatedly."""
    values = np.where(valid, values, 0.0)
    valid = valid.copy()
    for _ in range(max_passes):
        if valid.all():
            break
        v = np.pad(values, 1)
        m = np.pad(valid.astype(float), 1)
        h, w = values.shape
        total = np.zeros_like(values)
        count = np.zeros_like(values)
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                sl = (slice(1 + dr, 1 + dr + h), slice(1 + dc, 1 + dc + w))
                total += v[sl] * m[sl]
                count += m[sl]
        fill = ~valid & (count > 0)
        values = np.where(fill, total / np.maximum(count, 1), values)
        valid = valid | fill
    return values


def build_dtm(pc: PointCloud, cell_size: float = 0.5) -> Raster:
    """Terrain raster: per-cell mean ground height, gaps filled from neighbors."""
    ground = pc.classification == Classification.GROUND
    if not ground.any():
        raise InputError("cannot build a DTM: point cloud has no ground points")
    gt, width, height = grid_for_bounds(pc.bounds, cell_size)
    rows, cols = gt.cell_of(pc.x[ground], pc.y[ground])
    flat = rows * width + cols
    total = np.bincount(flat, weights=pc.z[ground], minlength=width * height)
    count = np.bincount(flat, minlength=width * height)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = (total / count).reshape(height, width)
    valid = (count > 0).reshape(height, width)
    filled = _neighbor_fill(mean, valid, width + height)
    return Raster(filled, gt)


def normalize_heights(pc: PointCloud, dtm: Raster) -> PointCloud:
    """Replace z with height above the DTM cell under each point, clamped at 0."""
    rows, cols = dtm.geotransform.cell_of(pc.x, pc.y)
    outside = (rows < 0) | (cols < 0) | (rows >= dtm.height) | (cols >= dtm.width)
    if outside.any():
        i = int(np.argmax(outside))
        raise InputError(f"point ({pc.x[i]}, {pc.y[i]}) lies outside the DTM extent")
    ground_z = dtm.band(0)[rows, cols]
    if (ground_z == dtm.nodata).any():
        raise InputError("DTM has nodata under some points")
    return replace(pc, z=np.maximum(pc.z - ground_z, 0.0))
