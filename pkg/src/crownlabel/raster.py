"""Gridded data model, grid-to-grid pixel mapping and raster filtering.

Rasters are stored band-sequential as ``values[band, row, col]``. The on-disk
``rasterbin`` format is a JSON sidecar (``<name>.json``) next to a raw payload
of little-endian float32 values (``<name>.bin``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from crownlabel.errors import InputError

DEFAULT_NODATA = -9999.0
_SNAP_TOL = 1e-9


@dataclass(frozen=True)
class Geotransform:
    """North-up grid placement: top-left corner plus square cell size in meters."""

    origin_x: float
    origin_y: float
    cell_size: float

    def __post_init__(self):
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise InputError(f"cell_size must be a positive finite number, got {self.cell_size}")

    def cell_center(self, r, c):
        """Map coordinates of the center of pixel ``(r, c)``. Works on arrays."""
        x = self.origin_x + (np.asarray(c) + 0.5) * self.cell_size
        y = self.origin_y - (np.asarray(r) + 0.5) * self.cell_size
        return x, y

    def cell_of(self, x, y):
        """Integer ``(row, col)`` of the pixel containing map point ``(x, y)``."""
        col = snap_floor((np.asarray(x, dtype=float) - self.origin_x) / self.cell_size)
        row = snap_floor((self.origin_y - np.asarray(y, dtype=float)) / self.cell_size)
        return row, col

    def to_dict(self) -> dict[str, float]:
        return {"origin_x": self.origin_x, "origin_y": self.origin_y, "cell_size": self.cell_size}


def snap_floor(v):
    """Floor that treats values within 1e-9 of an integer as that integer.

    Cell centers of a coarse grid often land exactly on fine-grid pixel edges
    (0.25 m / 0.05 m = 5); plain floor would send them either way depending on
    the last bit of the division.
    """
    v = np.asarray(v, dtype=float)
    nearest = np.round(v)
    close = np.abs(v - nearest) <= _SNAP_TOL * np.maximum(1.0, np.abs(v))
    out = np.where(close, nearest, np.floor(v)).astype(np.int64)
    return out if out.ndim else int(out)


def map_pixel(src: Geotransform, r: int, c: int, dst: Geotransform) -> tuple[int, int]:
    """Pixel of ``dst`` that contains the center of ``src`` pixel ``(r, c)``.

    Out-of-range results are returned unchanged; callers clip.
    """
    x, y = src.cell_center(r, c)
    rr, cc = dst.cell_of(x, y)
    return int(rr), int(cc)


def grid_for_bounds(bounds: tuple[float, float, float, float], cell_size: float
                    ) -> tuple[Geotransform, int, int]:
    """Grid snapped to multiples of ``cell_size`` that covers ``bounds``.

    Returns ``(geotransform, width, height)``. Points on the max edge fall in
    the last column/row, never outside.
    """
    min_x, min_y, max_x, max_y = bounds
    ox = math.floor(min_x / cell_size) * cell_size
    oy = math.ceil(max_y / cell_size) * cell_size
    gt = Geotransform(ox, oy, cell_size)
    r_max, c_max = gt.cell_of(max_x, min_y)
    return gt, int(c_max) + 1, int(r_max) + 1


@dataclass(frozen=True)
class Raster:
    """Immutable multi-band raster.

    ``values`` has shape ``(bands, height, width)``; every cell is finite or
    equal to ``nodata``.
    """

    values: np.ndarray
    geotransform: Geotransform
    nodata: float = DEFAULT_NODATA
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[np.newaxis]
        if v.ndim != 3 or min(v.shape) < 1:
            raise InputError(f"raster values must have shape (bands, height, width), got {v.shape}")
        if not np.issubdtype(v.dtype, np.floating):
            v = v.astype(np.float64)
        if not math.isfinite(self.nodata):
            raise InputError("nodata must be finite")
        bad = ~np.isfinite(v)
        if bad.any():
            raise InputError("raster contains non-finite values that are not nodata")
        v = v.view()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def band(self, i: int = 0) -> np.ndarray:
        return self.values[i]

    def valid(self, i: int = 0) -> np.ndarray:
        return self.values[i] != self.nodata

    def with_values(self, values: np.ndarray, **meta) -> "Raster":
        return Raster(values, self.geotransform, self.nodata, {**self.meta, **meta})

    def crop(self, row: int, col: int, height: int, width: int) -> "Raster":
        """Window of the raster with its geotransform shifted accordingly."""
        gt = self.geotransform
        sub = self.values[:, row:row + height, col:col + width]
        if sub.shape[1:] != (height, width):
            raise InputError("crop window exceeds raster extent")
        new_gt = Geotransform(gt.origin_x + col * gt.cell_size,
                              gt.origin_y - row * gt.cell_size, gt.cell_size)
        return Raster(sub.copy(), new_gt, self.nodata)


# --------------------------------------------------------------------------
# Gaussian smoothing


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ``ceil(3 * sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    k = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return w / w.sum()


def _correlate1d(a: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    # "symmetric" repeats the edge sample (d c b a | a b c d), which makes
    # the filter mass-conserving.
    radius = len(w) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (radius, radius)
    p = np.pad(a, pad, mode="symmetric")
    n = a.shape[axis]
    out = np.zeros(a.shape, dtype=float)
    for i, wi in enumerate(w):
        out += wi * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def _smooth2d(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    return _correlate1d(_correlate1d(a, w, 0), w, 1)


def gaussian_smooth(r: Raster, sigma: float) -> Raster:
    """Separable Gaussian filter with nodata-aware weight renormalization.

    Nodata cells contribute no weight and stay nodata in the output. Output
    values are clipped to the input's valid range so the filter never
    overshoots through rounding.
    """
    if sigma < 0:
        raise InputError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return r
    w = gaussian_kernel(sigma)
    out = np.empty(r.values.shape, dtype=np.float64)
    for b in range(r.bands):
        band = r.values[b].astype(np.float64)
        valid = band != r.nodata
        if not valid.any():
            out[b] = r.nodata
            continue
        lo, hi = band[valid].min(), band[valid].max()
        if valid.all():
            sm = _smooth2d(band, w)
        else:
            num = _smooth2d(np.where(valid, band, 0.0), w)
            den = _smooth2d(valid.astype(float), w)
            with np.errstate(invalid="ignore", divide="ignore"):
                sm = num / den
            valid &= den > 0
        out[b] = np.where(valid, np.clip(sm, lo, hi), r.nodata)
    return r.with_values(out)


# --------------------------------------------------------------------------
# rasterbin I/O

_HEADER_KEYS = ("width", "height", "bands", "dtype", "nodata", "origin_x", "origin_y", "cell_size")


def rasterbin_paths(path) -> tuple[Path, Path]:
    """Sidecar and payload paths for a rasterbin name.

    ``chm.rasterbin``, ``chm.json``, ``chm.bin`` and ``chm`` all name the
    pair ``chm.json`` + ``chm.bin``.
    """
    p = Path(path)
    if p.suffix in (".rasterbin", ".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def raster_header(r: Raster) -> dict[str, Any]:
    return {
        "width": r.width,
        "height": r.height,
        "bands": r.bands,
        "dtype": "f32",
        "nodata": float(r.nodata),
        **r.geotransform.to_dict(),
    }


def raster_to_bytes(r: Raster) -> bytes:
    return np.ascontiguousarray(r.values, dtype="<f4").tobytes()


def raster_from_parts(header: dict[str, Any], payload: bytes, source: str = "<memory>") -> Raster:
    """Build a raster from a parsed sidecar and its raw payload, validating both."""
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise InputError(f"{source}: malformed header, missing {missing}")
    if header["dtype"] != "f32":
        raise InputError(f"{source}: unsupported dtype {header['dtype']!r}")
    try:
        w, h, b = int(header["width"]), int(header["height"]), int(header["bands"])
        gt = Geotransform(float(header["origin_x"]), float(header["origin_y"]),
                          float(header["cell_size"]))
        nodata = float(header["nodata"])
    except (TypeError, ValueError) as exc:
        raise InputError(f"{source}: malformed header: {exc}") from None
    if min(w, h, b) < 1:
        raise InputError(f"{source}: malformed header, non-positive dimensions")
    expected = w * h * b * 4
    if len(payload) != expected:
        raise InputError(f"{source}: size mismatch, header implies {expected} bytes, "
                         f"payload has {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(b, h, w).astype(np.float32)
    meta = {"config": header["config"]} if "config" in header else {}
    return Raster(values, gt, nodata, meta)


def write_raster(r: Raster, path, config: dict | None = None) -> tuple[Path, Path]:
    """Write ``r`` as a rasterbin pair; returns ``(sidecar, payload)`` paths."""
    hdr_path, bin_path = rasterbin_paths(path)
    header = raster_header(r)
    if config is not None:
        header["config"] = config
    hdr_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(raster_to_bytes(r))
    hdr_path.write_text(json.dumps(header, indent=2) + "\n")
    return hdr_path, bin_path


def read_raster(path) -> Raster:
    hdr_path, bin_path = rasterbin_paths(path)
    for p in (hdr_path, bin_path):
        if not p.exists():
            raise InputError(f"raster file not found: {p}")
    try:
        header = json.loads(hdr_path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{hdr_path}: malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise InputError(f"{hdr_path}: malformed header, expected an object")
    return raster_from_parts(header, bin_path.read_bytes(), str(hdr_path))
