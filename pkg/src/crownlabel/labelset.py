"""Instance annotations: RLE masks, tiling, centroid assignment and JSON I/O.

Masks are stored as a tight bounding box ``(x, y, w, h)`` in the host grid plus
row-major run-length counts over that box, starting with a background run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from crownlabel.errors import InputError, InvariantError
from crownlabel.raster import Geotransform, snap_floor

log = logging.getLogger(__name__)

TILE_SIZE = 1024
TILE_STRIDE = 512


# --------------------------------------------------------------------------
# RLE


def rle_encode(bits) -> list[int]:
    """Run lengths of a flat (or row-major flattened) binary mask.

    The first run counts background pixels and may be 0.
    """
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(rle: Sequence[int], w: int, h: int) -> np.ndarray:
    counts = np.asarray(rle, dtype=np.int64)
    if (counts < 0).any():
        raise InputError("RLE counts must be non-negative")
    if int(counts.sum()) != w * h:
        raise InputError(f"RLE counts sum to {int(counts.sum())}, expected {w * h}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


# --------------------------------------------------------------------------
# Instances


@dataclass(frozen=True)
class InstanceMask:
    """One crown mask in some host pixel grid.

    ``centroid`` is ``(x, y)`` in pixel-center coordinates, so the center of
    pixel column ``c`` is at ``c + 0.5``.
    """

    id: int
    bbox: tuple[int, int, int, int]
    rle: tuple[int, ...]
    centroid: tuple[float, float]
    score: float | None = None
    fallback: bool = False
    height: float | None = None
    _bits: Any = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        x, y, w, h = self.bbox
        object.__setattr__(self, "bbox", (int(x), int(y), int(w), int(h)))
        object.__setattr__(self, "rle", tuple(int(c) for c in self.rle))
        object.__setattr__(self, "centroid", (float(self.centroid[0]), float(self.centroid[1])))
        if w < 1 or h < 1:
            raise InputError(f"instance {self.id}: bbox must have positive size")
        if sum(self.rle) != w * h:
            raise InputError(f"instance {self.id}: RLE counts do not cover the bbox")
        cx, cy = self.centroid
        if not (x <= cx <= x + w and y <= cy <= y + h):
            raise InputError(f"instance {self.id}: centroid lies outside bbox")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise InputError(f"instance {self.id}: score must lie in [0, 1]")

    def to_array(self) -> np.ndarray:
        """Boolean mask of shape ``(h, w)`` over the bbox. Cached."""
        if self._bits is None:
            bits = rle_decode(self.rle, self.bbox[2], self.bbox[3])
            bits.setflags(write=False)
            object.__setattr__(self, "_bits", bits)
        return self._bits

    @property
    def area(self) -> int:
        return int(sum(self.rle[1::2]))

    @classmethod
    def from_array(cls, mask, id: int, offset: tuple[int, int] = (0, 0), **kw) -> "InstanceMask":
        """Build from a boolean array whose pixel (0, 0) sits at ``offset = (x, y)``.

        The stored bbox is the tight box around the set pixels.
        """
        mask = np.asarray(mask, dtype=bool)
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        if rows.size == 0:
            raise InputError(f"instance {id}: empty mask")
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        crop = mask[r0:r1, c0:c1]
        rr, cc = np.nonzero(crop)
        x0, y0 = offset[0] + int(c0), offset[1] + int(r0)
        centroid = (x0 + cc.mean() + 0.5, y0 + rr.mean() + 0.5)
        return cls(id, (x0, y0, int(c1 - c0), int(r1 - r0)), rle_encode(crop), centroid, **kw)

    def translate(self, dx: int, dy: int) -> "InstanceMask":
        x, y, w, h = self.bbox
        return replace(self, bbox=(x + dx, y + dy, w, h),
                       centroid=(self.centroid[0] + dx, self.centroid[1] + dy))

    def clip(self, x0: int, y0: int, x1: int, y1: int) -> "InstanceMask | None":
        """Restrict to the window ``[x0, x1) x [y0, y1)``; ``None`` if nothing is left."""
        x, y, w, h = self.bbox
        if x >= x0 and y >= y0 and x + w <= x1 and y + h <= y1:
            return self
        cx0, cy0 = max(x, x0), max(y, y0)
        cx1, cy1 = min(x + w, x1), min(y + h, y1)
        if cx0 >= cx1 or cy0 >= cy1:
            return None
        sub = self.to_array()[cy0 - y:cy1 - y, cx0 - x:cx1 - x]
        if not sub.any():
            return None
        return InstanceMask.from_array(sub, self.id, (cx0, cy0), score=self.score,
                                       fallback=self.fallback, height=self.height)

    def paste(self, canvas: np.ndarray, value=True) -> None:
        """Write the mask into ``canvas`` (host-grid array), clipping at its edges."""
        x, y, w, h = self.bbox
        H, W = canvas.shape[:2]
        cx0, cy0, cx1, cy1 = max(x, 0), max(y, 0), min(x + w, W), min(y + h, H)
        if cx0 >= cx1 or cy0 >= cy1:
            return
        bits = self.to_array()[cy0 - y:cy1 - y, cx0 - x:cx1 - x]
        canvas[cy0:cy1, cx0:cx1][bits] = value


def intersection_area(a: InstanceMask, b: InstanceMask) -> int:
    ax, ay, aw, ah = a.bbox
    bx, by, bw, bh = b.bbox
    x0, y0 = max(ax, bx), max(ay, by)
    x1, y1 = min(ax + aw, bx + bw), min(ay + ah, by + bh)
    if x0 >= x1 or y0 >= y1:
        return 0
    sa = a.to_array()[y0 - ay:y1 - ay, x0 - ax:x1 - ax]
    sb = b.to_array()[y0 - by:y1 - by, x0 - bx:x1 - bx]
    return int(np.count_nonzero(sa & sb))


# --------------------------------------------------------------------------
# Tiles


@dataclass(frozen=True)
class TileSpec:
    """A square patch of the host grid.

    ``size=None`` marks an untiled set whose single "tile" is the whole grid.
    """

    origin: tuple[int, int]
    size: int | None = TILE_SIZE

    def __post_init__(self):
        object.__setattr__(self, "origin", (int(self.origin[0]), int(self.origin[1])))
        if self.size is not None and (self.size < 2 or self.size % 2):
            raise InputError(f"tile size must be a positive even number, got {self.size}")

    @property
    def stride(self) -> int | None:
        return None if self.size is None else self.size // 2

    def center_window(self) -> tuple[int, int, int, int] | None:
        """Central ``stride x stride`` window as half-open ``(x0, y0, x1, y1)``."""
        if self.size is None:
            return None
        off = (self.size - self.stride) // 2
        x0, y0 = self.origin[0] + off, self.origin[1] + off
        return x0, y0, x0 + self.stride, y0 + self.stride

    def in_center(self, x: float, y: float) -> bool:
        win = self.center_window()
        if win is None:
            return True
        return win[0] <= x < win[2] and win[1] <= y < win[3]


@dataclass
class Tile:
    spec: TileSpec
    instances: list[InstanceMask] = field(default_factory=list)


@dataclass(frozen=True)
class GridInfo:
    """Host grid of an annotation set: placement and pixel extent."""

    geotransform: Geotransform
    width: int
    height: int

    def to_dict(self) -> dict[str, Any]:
        return {**self.geotransform.to_dict(), "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GridInfo":
        return cls(Geotransform(float(d["origin_x"]), float(d["origin_y"]), float(d["cell_size"])),
                   int(d["width"]), int(d["height"]))


@dataclass
class AnnotationSet:
    cell_size_m: float
    tiles: list[Tile] = field(default_factory=list)
    grid: GridInfo | None = None
    config: dict[str, Any] | None = None
    dropped: int = 0

    def instances(self) -> list[InstanceMask]:
        return [inst for t in self.tiles for inst in t.instances]

    def __len__(self) -> int:
        return sum(len(t.instances) for t in self.tiles)

    @classmethod
    def untiled(cls, instances: Iterable[InstanceMask], grid: GridInfo, **kw) -> "AnnotationSet":
        return cls(grid.geotransform.cell_size, [Tile(TileSpec((0, 0), None), list(instances))],
                   grid=grid, **kw)

    def check_ids(self) -> None:
        ids = [i.id for i in self.instances()]
        if len(set(ids)) != len(ids):
            raise InputError("instance ids are not unique across the annotation set")


def make_tiles(extent: tuple[int, int], size: int = TILE_SIZE, stride: int = TILE_STRIDE) -> list[TileSpec]:
    """Row-major tiles covering a ``(width, height)`` pixel extent.

    Origins step by ``stride``; if the last regular tile falls short of the
    extent one more tile is added flush with the far edge.
    """
    if size != 2 * stride:
        raise InputError(f"tile size must be twice the stride (got size={size}, stride={stride})")
    width, height = extent
    if width < size or height < size:
        raise InputError(f"extent {width}x{height} is smaller than one {size}x{size} tile")

    def origins(n):
        o = list(range(0, n - size + 1, stride))
        if o[-1] + size < n:
            o.append(n - size)
        return o

    return [TileSpec((x, y), size) for y in origins(height) for x in origins(width)]


def assign_to_tiles(instances: Iterable[InstanceMask], tiles: Sequence[TileSpec],
                    cell_size_m: float, grid: GridInfo | None = None) -> AnnotationSet:
    """Attach each instance to the tile whose central window holds its centroid.

    Clamped edge tiles can have central windows overlapping a neighbor's; the
    first tile in row-major order wins, so each instance lands at most once.
    Instances are rebased to tile-local pixels and clipped to the tile.
    Instances whose centroid is in no window are dropped and counted.
    """
    out = [Tile(spec) for spec in tiles]
    dropped = 0
    for inst in instances:
        cx, cy = inst.centroid
        for tile in out:
            if tile.spec.in_center(cx, cy):
                ox, oy = tile.spec.origin
                local = inst.translate(-ox, -oy)
                size = tile.spec.size
                if size is not None:
                    local = local.clip(0, 0, size, size)
                if local is None:
                    raise InvariantError(f"instance {inst.id} vanished while clipping")
                tile.instances.append(local)
                break
        else:
            dropped += 1
    if dropped:
        log.info("dropped %d instance(s) with centroids outside every central window", dropped)
    aset = AnnotationSet(cell_size_m, out, grid=grid, dropped=dropped)
    aset.check_ids()
    return aset


# --------------------------------------------------------------------------
# Grid changes


def _axis_footprint(lo: int, n: int, src_origin: float, src_cs: float,
                    dst_origin: float, dst_cs: float, sign: float) -> tuple[int, np.ndarray]:
    """Destination indices whose centers fall in source cells ``[lo, lo + n)``.

    Returns the first destination index and, for each destination index from
    there on, the source index it maps to. ``sign`` is +1 for columns (x grows
    with index) and -1 for rows.
    """
    edge_a = src_origin + sign * lo * src_cs
    edge_b = src_origin + sign * (lo + n) * src_cs
    a = (edge_a - dst_origin) * sign / dst_cs
    b = (edge_b - dst_origin) * sign / dst_cs
    start = int(np.floor(min(a, b))) - 1
    stop = int(np.ceil(max(a, b))) + 1
    idx = np.arange(start, stop + 1)
    centers = dst_origin + sign * (idx + 0.5) * dst_cs
    src_idx = snap_floor((centers - src_origin) * sign / src_cs)
    inside = (src_idx >= lo) & (src_idx < lo + n)
    if not inside.any():
        return start, np.empty(0, dtype=np.int64)
    first, last = np.flatnonzero(inside)[[0, -1]]
    return int(idx[first]), src_idx[first:last + 1] - lo


def footprint(inst: InstanceMask, src: Geotransform, dst: Geotransform) -> tuple[int, int, np.ndarray]:
    """Pixels of grid ``dst`` whose centers fall inside ``inst`` (given in grid ``src``).

    Returns ``(row0, col0, bits)`` with ``bits`` a boolean array anchored at
    ``dst`` pixel ``(row0, col0)``.
    """
    x, y, w, h = inst.bbox
    col0, cmap = _axis_footprint(x, w, src.origin_x, src.cell_size, dst.origin_x, dst.cell_size, 1.0)
    row0, rmap = _axis_footprint(y, h, src.origin_y, src.cell_size, dst.origin_y, dst.cell_size, -1.0)
    bits = inst.to_array()[np.ix_(rmap, cmap)] if len(rmap) and len(cmap) else np.zeros((0, 0), bool)
    return row0, col0, bits


def upscale_instances(instances: Iterable[InstanceMask], chm_gt: Geotransform, ortho_gt: Geotransform,
                      extent: tuple[int, int] | None = None) -> list[InstanceMask]:
    """Nearest-neighbor transfer of masks from the CHM grid to ortho pixels.

    An ortho pixel belongs to a mask when its center falls in a mask cell.
    With ``extent=(width, height)`` the results are clipped to the ortho
    raster; instances left empty are dropped.
    """
    out = []
    for inst in instances:
        row0, col0, bits = footprint(inst, chm_gt, ortho_gt)
        if not bits.any():
            continue
        up = InstanceMask.from_array(bits, inst.id, (col0, row0), score=inst.score,
                                     fallback=inst.fallback, height=inst.height)
        if extent is not None:
            up = up.clip(0, 0, extent[0], extent[1])
            if up is None:
                continue
        out.append(up)
    return out


# --------------------------------------------------------------------------
# JSON


def instance_to_dict(inst: InstanceMask) -> dict[str, Any]:
    d: dict[str, Any] = {
        "id": inst.id,
        "bbox": list(inst.bbox),
        "rle": list(inst.rle),
        "score": inst.score,
        "centroid": list(inst.centroid),
    }
    if inst.fallback:
        d["fallback"] = True
    if inst.height is not None:
        d["height"] = inst.height
    return d


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise InputError(f"annotation schema violation: {msg}")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def instance_from_dict(d: dict[str, Any]) -> InstanceMask:
    _expect(isinstance(d, dict), "instance must be an object")
    for key in ("id", "bbox", "rle", "score", "centroid"):
        _expect(key in d, f"instance missing {key!r}")
    _expect(_is_int(d["id"]), "id must be an integer")
    _expect(isinstance(d["bbox"], list) and len(d["bbox"]) == 4 and all(map(_is_int, d["bbox"])),
            "bbox must be four integers")
    _expect(isinstance(d["rle"], list) and all(_is_int(c) and c >= 0 for c in d["rle"]),
            "rle must be a list of non-negative integers")
    _expect(d["score"] is None or _is_num(d["score"]), "score must be a number or null")
    _expect(isinstance(d["centroid"], list) and len(d["centroid"]) == 2
            and all(map(_is_num, d["centroid"])), "centroid must be two numbers")
    _expect(isinstance(d.get("fallback", False), bool), "fallback must be a boolean")
    _expect(d.get("height") is None or _is_num(d["height"]), "height must be a number")
    return InstanceMask(
        id=d["id"], bbox=tuple(d["bbox"]), rle=d["rle"], centroid=tuple(d["centroid"]),
        score=None if d["score"] is None else float(d["score"]),
        fallback=d.get("fallback", False),
        height=None if d.get("height") is None else float(d["height"]),
    )


def annotations_to_dict(aset: AnnotationSet) -> dict[str, Any]:
    doc: dict[str, Any] = {"cell_size_m": aset.cell_size_m}
    if aset.grid is not None:
        doc["grid"] = aset.grid.to_dict()
    doc["tiles"] = [
        {"origin": list(t.spec.origin), "size": t.spec.size,
         "instances": [instance_to_dict(i) for i in t.instances]}
        for t in aset.tiles
    ]
    if aset.dropped:
        doc["dropped"] = aset.dropped
    if aset.config is not None:
        doc["config"] = aset.config
    return doc


def annotations_from_dict(doc: dict[str, Any]) -> AnnotationSet:
    _expect(isinstance(doc, dict), "document must be an object")
    _expect("cell_size_m" in doc and _is_num(doc["cell_size_m"]) and doc["cell_size_m"] > 0,
            "cell_size_m must be a positive number")
    _expect(isinstance(doc.get("tiles"), list), "tiles must be a list")
    tiles = []
    for t in doc["tiles"]:
        _expect(isinstance(t, dict), "tile must be an object")
        _expect(isinstance(t.get("origin"), list) and len(t["origin"]) == 2
                and all(map(_is_int, t["origin"])), "tile origin must be two integers")
        _expect("size" in t and (t["size"] is None or _is_int(t["size"])), "tile size must be an integer or null")
        _expect(isinstance(t.get("instances"), list), "tile instances must be a list")
        tiles.append(Tile(TileSpec(tuple(t["origin"]), t["size"]),
                          [instance_from_dict(i) for i in t["instances"]]))
    grid = None
    if doc.get("grid") is not None:
        try:
            grid = GridInfo.from_dict(doc["grid"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"annotation schema violation: bad grid: {exc}") from None
    dropped = doc.get("dropped", 0)
    _expect(_is_int(dropped) and dropped >= 0, "dropped must be a non-negative integer")
    aset = AnnotationSet(float(doc["cell_size_m"]), tiles, grid=grid, config=doc.get("config"),
                         dropped=dropped)
    aset.check_ids()
    return aset


def dumps_annotations(aset: AnnotationSet) -> str:
    return json.dumps(annotations_to_dict(aset), separators=(",", ":")) + "\n"


def write_annotations(aset: AnnotationSet, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dumps_annotations(aset))


def read_annotations(path) -> AnnotationSet:
    p = Path(path)
    if not p.exists():
        raise InputError(f"annotation file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON: {exc}") from None
    return annotations_from_dict(doc)
