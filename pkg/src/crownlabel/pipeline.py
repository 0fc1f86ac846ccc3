"""File-to-file stage drivers shared by the CLI and ``run-all``.

Every stage writes its effective configuration into its output artifact.
"""

from __future__ import annotations

import json
import logging
import os
import time
from pathlib import Path
from typing import Any

from crownlabel import chm as chm_mod
from crownlabel import delineate as dl
from crownlabel import enhancer, evaluate, plotting, postfilter, spectral
from crownlabel.errors import InputError
from crownlabel.labelset import (
    TILE_SIZE, TILE_STRIDE, AnnotationSet, GridInfo, Tile, assign_to_tiles, make_tiles,
    read_annotations, upscale_instances, write_annotations,
)
from crownlabel.pointcloud import (
    Classification, build_dtm, classify_ground_fallback, normalize_heights, read_point_cloud,
)
from crownlabel.raster import read_raster, write_raster

log = logging.getLogger(__name__)

DEFAULTS: dict[str, dict[str, Any]] = {
    "chm": {"cell": chm_mod.DEFAULT_CELL_SIZE, "channels": list(chm_mod.DEFAULT_CHANNELS),
            "ground_grid": 1.0, "ground_tol": 0.2},
    "delineate": {"sigma": dl.DEFAULT_SIGMA, "min_height": dl.DEFAULT_MIN_HEIGHT,
                  "win_a": dl.DEFAULT_WIN_A, "win_b": dl.DEFAULT_WIN_B},
    "ndvi": {"threshold": spectral.DEFAULT_NDVI_THRESHOLD},
    "tile": {"size": TILE_SIZE, "stride": TILE_STRIDE},
    "enhance": {"endpoint": None, "file_dir": None, "mock_threshold": enhancer.DEFAULT_MOCK_THRESHOLD,
                "attempts": enhancer.DEFAULT_ATTEMPTS},
    "postfilter": {"mask": postfilter.DEFAULT_MASK_THRESHOLD, "score": postfilter.DEFAULT_SCORE_THRESHOLD,
                   "nms_iou": postfilter.DEFAULT_NMS_IOU, "ios": postfilter.DEFAULT_IOS, "box_nms": False},
    "eval": {"overlap": evaluate.DEFAULT_OVERLAP, "mode": "iou", "window": "center",
             "bootstrap": evaluate.DEFAULT_BOOTSTRAP, "level": evaluate.DEFAULT_LEVEL},
}


def _show(path, root=None) -> str | None:
    """Path as echoed in configs; relative to ``root`` so output trees can be compared."""
    if path is None:
        return None
    return os.path.relpath(path, root) if root is not None else str(path)


def _grid_of(aset: AnnotationSet, path) -> GridInfo:
    if aset.grid is None:
        raise InputError(f"{path}: annotation set carries no grid description")
    return aset.grid


def run_chm(points, out, cell=0.5, channels=(1, 2), ground_grid=1.0, ground_tol=0.2, root=None) -> Path:
    pc = read_point_cloud(points)
    used_fallback = False
    if not (pc.classification == Classification.GROUND).any():
        pc = classify_ground_fallback(pc, ground_grid, ground_tol)
        used_fallback = True
    dtm = build_dtm(pc, cell)
    chm = chm_mod.fill_chm_gaps(chm_mod.rasterize_chm(normalize_heights(pc, dtm), cell, channels))
    config = {"stage": "chm", "points": _show(points, root), "cell": cell, "channels": sorted(channels),
              "ground_grid": ground_grid, "ground_tol": ground_tol, "ground_fallback": used_fallback}
    hdr, _ = write_raster(chm, out, config)
    return hdr


def run_delineate(chm_path, out, sigma=1.0, min_height=2.0, win_a=1.0, win_b=0.05, root=None) -> AnnotationSet:
    chm = read_raster(chm_path)
    sm, _ = dl.delineate(chm, sigma, min_height, win_a, win_b)
    grid = GridInfo(chm.geotransform, chm.width, chm.height)
    aset = AnnotationSet.untiled(dl.segments_to_instances(sm), grid)
    aset.config = {"stage": "delineate", "chm": _show(chm_path, root), "sigma": sigma, "min_height": min_height,
                   "win_a": win_a, "win_b": win_b, "segments": sm.count}
    write_annotations(aset, out)
    return aset


def run_ndvi_filter(ortho_path, bands_path, annotations, out, threshold=0.2, hist=None,
                    ndvi_out=None, root=None) -> AnnotationSet:
    """Filter coarse CHM-grid segments by mean index and move survivors to ortho pixels."""
    ortho = read_raster(ortho_path)
    bands = spectral.BandSet.from_json(bands_path) if bands_path else spectral.BandSet()
    coarse = read_annotations(annotations)
    chm_grid = _grid_of(coarse, annotations)
    ndvi = spectral.compute_ndvi(ortho, bands)
    if ndvi_out:
        write_raster(ndvi, ndvi_out, {"stage": "ndvi", "ortho": _show(ortho_path, root), "bands": bands.__dict__})
    instances = coarse.instances()
    means = spectral.segment_mean_index(instances, chm_grid.geotransform, ndvi)
    if hist:
        spectral.write_histogram_csv(means, hist)
        plotting.ndvi_histogram(means, threshold, Path(hist).with_suffix(".png"))
    kept = spectral.filter_by_ndvi(instances, means, threshold)
    up = upscale_instances(kept, chm_grid.geotransform, ortho.geotransform, (ortho.width, ortho.height))
    grid = GridInfo(ortho.geotransform, ortho.width, ortho.height)
    aset = AnnotationSet.untiled(up, grid)
    aset.config = {"stage": "ndvi-filter", "ortho": _show(ortho_path, root), "annotations": _show(annotations, root),
                   "bands": bands.__dict__, "threshold": threshold, "segments_in": len(instances),
                   "segments_kept": len(kept)}
    write_annotations(aset, out)
    log.info("ndvi filter kept %d of %d segments", len(kept), len(instances))
    return aset


def run_tile(annotations, out, size=TILE_SIZE, stride=TILE_STRIDE, root=None) -> AnnotationSet:
    src = read_annotations(annotations)
    grid = _grid_of(src, annotations)
    tiles = make_tiles((grid.width, grid.height), size, stride)
    instances = [i.translate(t.spec.origin[0], t.spec.origin[1]) for t in src.tiles for i in t.instances]
    aset = assign_to_tiles(instances, tiles, src.cell_size_m, grid)
    aset.config = {"stage": "tile", "annotations": _show(annotations, root), "size": size, "stride": stride,
                   "dropped": aset.dropped}
    write_annotations(aset, out)
    return aset


def make_client(endpoint=None, mock_guide=None, file_dir=None, mock_threshold=0.2):
    if sum(x is not None for x in (endpoint, mock_guide, file_dir)) != 1:
        raise InputError("choose exactly one of endpoint, mock guide or file directory")
    if endpoint is not None:
        return enhancer.HttpClient(endpoint)
    if file_dir is not None:
        return enhancer.FileClient(Path(file_dir))
    return enhancer.MockClient(read_raster(mock_guide), mock_threshold)


def run_enhance(tiles_path, out, ortho=None, endpoint=None, mock_guide=None, file_dir=None,
                mock_threshold=0.2, attempts=3, jobs=1, root=None) -> AnnotationSet:
    src = read_annotations(tiles_path)
    client = make_client(endpoint, mock_guide, file_dir, mock_threshold)
    # the in-process mock reads its guide band directly; only remote segmenters need pixels
    image = read_raster(ortho) if ortho and not isinstance(client, enhancer.MockClient) else None
    aset = enhancer.enhance_set(src, client, image, jobs=jobs, attempts=attempts)
    aset.config = {"stage": "enhance", "tiles": _show(tiles_path, root), "ortho": _show(ortho, root),
                   "endpoint": endpoint, "mock_guide": _show(mock_guide, root),
                   "file_dir": _show(file_dir, root),
                   "mock_threshold": mock_threshold, "attempts": attempts,
                   "fallbacks": sum(i.fallback for i in aset.instances())}
    write_annotations(aset, out)
    return aset


def run_postfilter(annotations, out, score=0.3, nms_iou=0.3, ios=0.8, box_nms=False, mask=0.5, root=None) -> AnnotationSet:
    src = read_annotations(annotations)
    tiles = [Tile(t.spec, postfilter.postfilter(t.instances, score, nms_iou, ios, box_nms)) for t in src.tiles]
    aset = AnnotationSet(src.cell_size_m, tiles, grid=src.grid, dropped=src.dropped)
    aset.config = {"stage": "postfilter", "annotations": _show(annotations, root), "mask": mask, "score": score,
                   "nms_iou": nms_iou, "ios": ios, "box_nms": box_nms,
                   "instances_in": len(src), "instances_out": len(aset)}
    write_annotations(aset, out)
    return aset


def run_eval(pred, gt, out, overlap=0.5, mode="iou", window="center", bootstrap=1000, level=0.95,
             seed=42, jobs=1, name="prediction", root=None) -> evaluate.EvalReport:
    report = evaluate.evaluate_dataset(read_annotations(pred), read_annotations(gt), overlap, mode,
                                       window, bootstrap, level, seed, jobs)
    report.config.update({"stage": "eval", "pred": _show(pred, root), "gt": _show(gt, root)})
    paths = evaluate.write_report({name: report}, out)
    plotting.iou_histogram(report.per_tree_iou, report.miou, (report.ci_low, report.ci_high),
                           paths[0].with_suffix(".png"), name)
    return report


def _merge(defaults: dict, override: dict | None) -> dict:
    out = dict(defaults)
    for k, v in (override or {}).items():
        if k not in out:
            raise InputError(f"unknown config key {k!r}")
        out[k] = v
    return out


def run_all(config_path, out_dir, seed: int | None = None, jobs: int | None = None) -> dict[str, Any]:
    """Run every stage on the inputs named in a pipeline config.

    Input paths in the config are relative to the config file. Returns a
    summary dict that is also written to ``<out_dir>/summary.json``.
    """
    config_path = Path(config_path)
    if not config_path.exists():
        raise InputError(f"config not found: {config_path}")
    try:
        cfg = json.loads(config_path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{config_path}: invalid JSON: {exc}") from None
    base = config_path.parent
    for key in ("points", "ortho"):
        if key not in cfg:
            raise InputError(f"{config_path}: missing {key!r}")

    def resolve(p):
        return None if p is None else base / p

    seed = cfg.get("seed", evaluate.DEFAULT_SEED) if seed is None else seed
    jobs = cfg.get("jobs", 1) if jobs is None else jobs
    stage = {name: _merge(d, cfg.get(name)) for name, d in DEFAULTS.items()}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}

    t0 = time.perf_counter()
    c = stage["chm"]
    run_chm(resolve(cfg["points"]), out / "chm.rasterbin", c["cell"], c["channels"],
            c["ground_grid"], c["ground_tol"], root=out)
    timings["chm"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    d = stage["delineate"]
    run_delineate(out / "chm.rasterbin", out / "coarse.json", d["sigma"], d["min_height"], d["win_a"], d["win_b"], root=out)
    timings["delineate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    run_ndvi_filter(resolve(cfg["ortho"]), resolve(cfg.get("bands")), out / "coarse.json", out / "filtered.json",
                    stage["ndvi"]["threshold"], out / "ndvi_hist.csv", out / "ndvi.rasterbin", root=out)
    timings["ndvi"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    run_tile(out / "filtered.json", out / "tiled.json", stage["tile"]["size"], stage["tile"]["stride"], root=out)
    timings["tile"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    e = stage["enhance"]
    remote = e["endpoint"] is not None or e["file_dir"] is not None
    run_enhance(out / "tiled.json", out / "pseudo.json", ortho=resolve(cfg["ortho"]) if remote else None,
                endpoint=e["endpoint"], file_dir=e["file_dir"],
                mock_guide=None if remote else out / "ndvi.rasterbin",
                mock_threshold=e["mock_threshold"], attempts=e["attempts"], jobs=jobs, root=out)
    timings["enhance"] = time.perf_counter() - t0

    summary: dict[str, Any] = {"config": _show(config_path, out), "seed": seed, "stages": stage}
    if cfg.get("gt"):
        t0 = time.perf_counter()
        ev = stage["eval"]
        gt = read_annotations(resolve(cfg["gt"]))
        reports = {}
        for name, path in (("Coarse masks", out / "tiled.json"), ("Pseudo masks", out / "pseudo.json")):
            reports[name] = evaluate.evaluate_dataset(read_annotations(path), gt, ev["overlap"], ev["mode"],
                                                      ev["window"], ev["bootstrap"], ev["level"], seed, jobs)
            reports[name].config.update({"stage": "eval", "pred": _show(path, out),
                                         "gt": _show(resolve(cfg["gt"]), out)})
        evaluate.write_report(reports, out / "report.json")
        plotting.method_comparison(reports, out / "report.png")
        for name, rep in reports.items():
            slug = name.split()[0].lower()
            plotting.iou_histogram(rep.per_tree_iou, rep.miou, (rep.ci_low, rep.ci_high),
                                   out / f"report_{slug}_iou.png", name)
        summary["miou"] = {name: rep.miou for name, rep in reports.items()}
        timings["eval"] = time.perf_counter() - t0
    # timings vary run to run, so they go to the log, not to the outputs
    log.info("stage timings: %s", {k: round(v, 2) for k, v in timings.items()})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str) + "\n")
    return summary
