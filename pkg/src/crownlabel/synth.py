"""Synthetic scenes for tests and demos.

The main scene is a flat-ish plot of round crowns: a lidar point cloud whose
canopy returns trace paraboloid crowns, a five-band orthophoto where the same
crowns appear as vegetation discs on pavement, and disc-shaped ground-truth
masks. A few trees exist only in the point cloud (felled before the image was
taken), so their segments sit on pavement and should fail the NDVI filter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from crownlabel.labelset import (
    AnnotationSet, GridInfo, InstanceMask, Tile, TileSpec, assign_to_tiles, make_tiles, write_annotations,
)
from crownlabel.pointcloud import Classification, PointCloud, write_point_cloud
from crownlabel.raster import Geotransform, Raster, write_raster
from crownlabel.spectral import BandSet

ORIGIN = (385000.0, 6672000.0)
ORTHO_CELL = 0.05

# blue, green, red, red edge, NIR reflectances
CANOPY = np.array([0.04, 0.08, 0.05, 0.25, 0.45])
PAVEMENT = np.array([0.18, 0.19, 0.20, 0.22, 0.24])


@dataclass
class Tree:
    x: float
    y: float
    radius: float
    height: float
    visible: bool = True

    def surface(self, d):
        """Crown top height at horizontal distance ``d`` (nan outside the crown)."""
        d = np.asarray(d, dtype=float)
        return np.where(d <= self.radius, self.height * (1.0 - 0.55 * (d / self.radius) ** 2), np.nan)


def place_trees(rng: np.random.Generator, extent_m: float, n_trees: int, n_felled: int,
                gap: float = 0.6, margin: float = 1.0, max_tries: int = 20000) -> list[Tree]:
    """Rejection-sample non-touching crowns inside a square plot (local meters)."""
    trees: list[Tree] = []
    tries = 0
    while len(trees) < n_trees + n_felled and tries < max_tries:
        tries += 1
        r = rng.uniform(1.8, 3.5)
        x, y = rng.uniform(margin, extent_m - margin, size=2)
        if any(np.hypot(x - t.x, y - t.y) < r + t.radius + gap for t in trees):
            continue
        h = 6.0 + 3.5 * r + rng.normal(0.0, 0.5)
        trees.append(Tree(float(x), float(y), float(r), float(h)))
    for t in trees[n_trees:]:
        t.visible = False
    return trees


def _nearest_surface(trees: list[Tree], x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Canopy height (nan where open) and owning tree index (-1) at local points."""
    top = np.full(x.shape, np.nan)
    owner = np.full(x.shape, -1, dtype=np.int64)
    for k, t in enumerate(trees):
        s = t.surface(np.hypot(x - t.x, y - t.y))
        better = np.isfinite(s) & ~(s <= top)
        top = np.where(better, s, top)
        owner = np.where(better, k, owner)
    return top, owner


def simulate_points(rng: np.random.Generator, trees: list[Tree], extent_m: float,
                    density: float = 16.0) -> PointCloud:
    """Lidar returns over the plot on a gently tilted terrain."""
    n = rng.poisson(density * extent_m * extent_m)
    lx, ly = rng.uniform(0.0, extent_m, size=(2, n))
    ground = 12.0 + 0.02 * lx + 0.01 * ly
    canopy, _ = _nearest_surface(trees, lx, ly)
    under = np.isfinite(canopy)
    channel = rng.integers(1, 4, size=n)

    xs, ys, zs, ret, cls, ch = [], [], [], [], [], []

    def add(mask, z, r, c):
        xs.append(lx[mask]); ys.append(ly[mask]); zs.append(z[mask])
        ret.append(np.full(mask.sum(), r)); cls.append(np.full(mask.sum(), int(c))); ch.append(channel[mask])

    noise = rng.normal(0.0, 0.05, size=n)
    add(~under, ground + noise, 1, Classification.GROUND)
    add(under, ground + np.nan_to_num(canopy) + noise, 1, Classification.VEGETATION)
    second = under & (rng.random(n) < 0.4)
    mid = ground + np.nan_to_num(canopy) * rng.uniform(0.2, 0.8, size=n)
    add(second, mid, 2, Classification.VEGETATION)
    last = under & (rng.random(n) < 0.3)
    add(last, ground + noise, 3, Classification.GROUND)

    x0, y0 = ORIGIN
    return PointCloud.from_arrays(
        x=x0 + np.concatenate(xs), y=y0 - np.concatenate(ys), z=np.concatenate(zs),
        return_number=np.concatenate(ret), classification=np.concatenate(cls),
        channel=np.concatenate(ch),
    )


def render_ortho(rng: np.random.Generator, trees: list[Tree], size_px: int,
                 noise: float = 0.03) -> tuple[Raster, np.ndarray]:
    """Five-band image plus the per-pixel owning-tree index (-1 for pavement)."""
    centers = (np.arange(size_px) + 0.5) * ORTHO_CELL
    owner = np.full((size_px, size_px), -1, dtype=np.int64)
    for k, t in enumerate(trees):
        if not t.visible:
            continue
        r0 = max(int((t.y - t.radius) / ORTHO_CELL) - 1, 0)
        r1 = min(int((t.y + t.radius) / ORTHO_CELL) + 2, size_px)
        c0 = max(int((t.x - t.radius) / ORTHO_CELL) - 1, 0)
        c1 = min(int((t.x + t.radius) / ORTHO_CELL) + 2, size_px)
        d = np.hypot(centers[c0:c1][None, :] - t.x, centers[r0:r1][:, None] - t.y)
        owner[r0:r1, c0:c1][d <= t.radius] = k
    veg = owner >= 0
    bands = np.empty((5, size_px, size_px), dtype=np.float32)
    for b in range(5):
        base = np.where(veg, CANOPY[b], PAVEMENT[b]).astype(np.float32)
        bands[b] = base + rng.normal(0.0, noise, size=(size_px, size_px)).astype(np.float32)
    np.clip(bands, 0.001, 1.0, out=bands)
    gt = Geotransform(ORIGIN[0], ORIGIN[1], ORTHO_CELL)
    return Raster(bands, gt), owner


def truth_instances(owner: np.ndarray, trees: list[Tree]) -> list[InstanceMask]:
    out = []
    for k, sl in enumerate(ndimage.find_objects(owner + 1)):
        if sl is None:
            continue
        mask = owner[sl] == k
        out.append(InstanceMask.from_array(mask, k + 1, (sl[1].start, sl[0].start), height=trees[k].height))
    return out


def make_scene(out_dir, seed: int = 7, size_px: int = 2048, n_trees: int = 90, n_felled: int = 8) -> dict:
    """Write a complete synthetic scene and a matching ``pipeline.json``.

    Files: ``points.csv``, ``ortho.json/.bin``, ``bands.json``, ``gt.json``,
    ``pipeline.json``. Returns the pipeline config.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    extent_m = size_px * ORTHO_CELL
    trees = place_trees(rng, extent_m, n_trees, n_felled)
    pc = simulate_points(rng, trees, extent_m)
    ortho, owner = render_ortho(rng, trees, size_px)

    write_point_cloud(pc, out / "points.csv")
    write_raster(ortho, out / "ortho.rasterbin")
    (out / "bands.json").write_text(json.dumps(BandSet().__dict__) + "\n")

    grid = GridInfo(ortho.geotransform, size_px, size_px)
    gt = assign_to_tiles(truth_instances(owner, trees), make_tiles((size_px, size_px)), ORTHO_CELL, grid)
    gt.config = {"synthetic": True, "seed": seed, "trees": n_trees, "felled": n_felled}
    write_annotations(gt, out / "gt.json")

    config = {
        "points": "points.csv",
        "ortho": "ortho.rasterbin",
        "bands": "bands.json",
        "gt": "gt.json",
        "seed": 42,
    }
    (out / "pipeline.json").write_text(json.dumps(config, indent=2) + "\n")
    return config


# --------------------------------------------------------------------------
# Small constructed scenes


def disc(cx: float, cy: float, r: float, shape: tuple[int, int]) -> np.ndarray:
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


def edge_truncation_scene(seed: int = 0, size: int = 1024, n: int = 40) -> tuple[AnnotationSet, AnnotationSet]:
    """One tile of disc crowns; predictions are exact except near tile edges.

    Crowns whose centroid falls outside the central window are predicted
    with the outer half (towards the nearest tile edge) cut away, imitating
    a model trained only on central labels. Returns ``(pred, gt)``.
    """
    rng = np.random.default_rng(seed)
    spec = TileSpec((0, 0), size)
    gts, preds = [], []
    placed: list[tuple[float, float, float]] = []
    while len(gts) < n:
        r = rng.uniform(30, 60)
        cx, cy = rng.uniform(0, size, size=2)
        if any(np.hypot(cx - x, cy - y) < r + q + 4 for x, y, q in placed):
            continue
        m = disc(cx, cy, r, (size, size))
        if not m.any():
            continue
        placed.append((cx, cy, r))
        g = InstanceMask.from_array(m, len(gts) + 1)
        gts.append(g)
        if spec.in_center(*g.centroid):
            preds.append(InstanceMask.from_array(m, len(gts), score=0.9))
            continue
        gx, gy = g.centroid
        # distance to each edge: left, right, top, bottom
        edge = int(np.argmin([gx, size - gx, gy, size - gy]))
        yy, xx = np.mgrid[:size, :size]
        keep = [xx + 0.5 >= gx, xx + 0.5 < gx, yy + 0.5 >= gy, yy + 0.5 < gy][edge]
        cut = m & keep
        preds.append(InstanceMask.from_array(cut if cut.any() else m, len(gts), score=0.9))
    gt = AnnotationSet(1.0, [Tile(spec, gts)])
    pred = AnnotationSet(1.0, [Tile(spec, preds)])
    return pred, gt


def gaussian_bump_chm(rng: np.random.Generator, n_bumps: int, shape: tuple[int, int] = (128, 128),
                      height: tuple[float, float] = (6.0, 16.0), spread: tuple[float, float] = (2.0, 4.0),
                      min_separation: float = 0.0, cell_size: float = 0.5,
                      max_tries: int = 10000) -> tuple[Raster, list[tuple[float, float, float]]]:
    """CHM made of round bumps, combined by maximum so every apex stays a peak.

    Bump centers (row, col) are at least ``min_separation`` cells apart and
    sit on cell centers. Returns the raster and the ``(row, col, peak)`` list.
    """
    peaks: list[tuple[float, float, float]] = []
    tries = 0
    while len(peaks) < n_bumps:
        tries += 1
        if tries > max_tries:
            raise ValueError("could not place bumps with the requested separation")
        r, c = (int(v) for v in rng.integers(8, np.array(shape) - 8))
        if any(np.hypot(r - pr, c - pc) <= min_separation for pr, pc, _ in peaks):
            continue
        peaks.append((r, c, float(rng.uniform(*height))))
    spreads = rng.uniform(*spread, size=n_bumps)
    yy, xx = np.mgrid[:shape[0], :shape[1]]
    chm = np.zeros(shape)
    for (r, c, h), s in zip(peaks, spreads):
        np.maximum(chm, h * np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * s * s)), out=chm)
    return Raster(chm[None], Geotransform(ORIGIN[0], ORIGIN[1], cell_size)), peaks


def square_prompt_scene(seed: int = 0, size: int = 1024, n: int = 30,
                        noise: float = 0.03) -> tuple[AnnotationSet, AnnotationSet, Raster]:
    """Disc crowns on one tile with their bounding squares as coarse labels.

    Returns ``(coarse, gt, guide)`` where ``guide`` is an index raster that is
    high on the discs and low elsewhere, with mild noise.
    """
    rng = np.random.default_rng(seed)
    spec = TileSpec((0, 0), size)
    gts, coarse = [], []
    placed: list[tuple[float, float, float]] = []
    veg = np.zeros((size, size), dtype=bool)
    while len(gts) < n:
        r = rng.uniform(20, 45)
        cx, cy = rng.uniform(size / 4 + 5, 3 * size / 4 - 5, size=2)
        if any(np.hypot(cx - x, cy - y) < r + q + 6 for x, y, q in placed):
            continue
        placed.append((cx, cy, r))
        m = disc(cx, cy, r, (size, size))
        veg |= m
        g = InstanceMask.from_array(m, len(gts) + 1)
        gts.append(g)
        x, y, w, h = g.bbox
        square = np.zeros((h, w), dtype=bool) | True
        coarse.append(InstanceMask.from_array(square, g.id, (x, y)))
    index = np.where(veg, 0.6, 0.05) + rng.normal(0.0, noise, size=(size, size))
    guide = Raster(index[None], Geotransform(ORIGIN[0], ORIGIN[1], ORTHO_CELL))
    return (AnnotationSet(ORTHO_CELL, [Tile(spec, coarse)]), AnnotationSet(ORTHO_CELL, [Tile(spec, gts)]), guide)
