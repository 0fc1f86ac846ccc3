"""Instance matching, precision/recall/F1, per-tree mIoU and bootstrap intervals."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from crownlabel.errors import InputError
from crownlabel.labelset import AnnotationSet, InstanceMask, intersection_area

DEFAULT_OVERLAP = 0.5
DEFAULT_BOOTSTRAP = 1000
DEFAULT_LEVEL = 0.95
DEFAULT_SEED = 42

_MASK64 = (1 << 64) - 1
_XS_MULT = 0x2545F4914F6CDD1D


# --------------------------------------------------------------------------
# Seeded PRNG: xorshift64* streams seeded through splitmix64


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """Scalar xorshift64* generator. The vectorized bootstrap must match it draw for draw."""

    def __init__(self, seed: int):
        self.state = splitmix64(seed & _MASK64) or 1

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK64
        x ^= x >> 27
        self.state = x
        return (x * _XS_MULT) & _MASK64

    def index(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` from the top 53 bits."""
        return min(int(float(self.next_u64() >> 11) * 2.0 ** -53 * n), n - 1)


def _resample_means(values: np.ndarray, seed: int, start: int, stop: int) -> np.ndarray:
    # One xorshift64* stream per resample, seeded with seed + resample index,
    # stepped in lockstep across the chunk.
    n = len(values)
    states = np.array([splitmix64((seed + i) & _MASK64) or 1 for i in range(start, stop)], dtype=np.uint64)
    sums = np.zeros(stop - start)
    s12, s25, s27, s11 = (np.uint64(k) for k in (12, 25, 27, 11))
    mult = np.uint64(_XS_MULT)
    for _ in range(n):
        states ^= states >> s12
        states ^= states << s25
        states ^= states >> s27
        out = states * mult
        idx = np.minimum(((out >> s11).astype(np.float64) * 2.0 ** -53 * n).astype(np.int64), n - 1)
        sums += values[idx]
    return sums / n


def bootstrap_means(values: Sequence[float], n: int = DEFAULT_BOOTSTRAP, seed: int = DEFAULT_SEED,
                    jobs: int = 1) -> np.ndarray:
    """Means of ``n`` with-replacement resamples, reproducible for any ``jobs``."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise InputError("bootstrap needs at least one value")
    if n < 1:
        raise InputError("bootstrap needs at least one resample")
    jobs = max(1, int(jobs))
    if jobs == 1:
        return _resample_means(vals, seed, 0, n)
    bounds = np.linspace(0, n, jobs + 1).astype(int)
    with ThreadPoolExecutor(jobs) as pool:
        parts = pool.map(lambda ab: _resample_means(vals, seed, ab[0], ab[1]),
                         [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a])
        return np.concatenate(list(parts))


def bootstrap_ci(values: Sequence[float], n: int = DEFAULT_BOOTSTRAP, level: float = DEFAULT_LEVEL,
                 seed: int = DEFAULT_SEED, jobs: int = 1) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    if not 0.0 <= level < 1.0:
        raise InputError(f"level must lie in [0, 1), got {level}")
    means = bootstrap_means(values, n, seed, jobs)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# Matching and metrics


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)
    unmatched_pred: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_pred)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


def match_instances(preds: Sequence[InstanceMask], gts: Sequence[InstanceMask],
                    thr: float = DEFAULT_OVERLAP, mode: str = "iou") -> MatchResult:
    """One-to-one greedy matching on mask overlap.

    Candidate pairs need overlap >= ``thr``, where overlap is IoU
    (``mode="iou"``) or intersection over the ground-truth area
    (``mode="iogt"``). Pairs are accepted by descending overlap, ties going to
    the smaller gt id and then the smaller pred id. Recorded pair values are
    always IoU.
    """
    if mode not in ("iou", "iogt"):
        raise InputError(f"unknown overlap mode {mode!r}")
    cands = []
    for g in gts:
        for p in preds:
            inter = intersection_area(g, p)
            if not inter:
                continue
            iou = inter / (g.area + p.area - inter)
            score = iou if mode == "iou" else inter / g.area
            if score >= thr:
                cands.append((-score, g.id, p.id, iou))
    cands.sort()
    used_g: set[int] = set()
    used_p: set[int] = set()
    pairs = []
    for _, gid, pid, iou in cands:
        if gid in used_g or pid in used_p:
            continue
        used_g.add(gid)
        used_p.add(pid)
        pairs.append((gid, pid, iou))
    return MatchResult(pairs,
                       [g.id for g in gts if g.id not in used_g],
                       [p.id for p in preds if p.id not in used_p])


def counts_to_prf1(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F1; any zero denominator gives 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def prf1(m: MatchResult) -> tuple[float, float, float]:
    return counts_to_prf1(m.tp, m.fp, m.fn)


def mean_iou(m: MatchResult, gts: Sequence[InstanceMask]) -> tuple[float, list[float]]:
    """Per-gt IoU with its match (0 when unmatched) and the mean over all gt trees."""
    by_gt = {gid: iou for gid, _, iou in m.pairs}
    per_tree = [by_gt.get(g.id, 0.0) for g in gts]
    return (float(np.mean(per_tree)) if per_tree else 0.0), per_tree


# --------------------------------------------------------------------------
# Dataset evaluation


@dataclass
class EvalReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    miou: float
    ci_low: float | None
    ci_high: float | None
    per_tree_iou: list[float]
    gt_ids: list[int]
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "miou": self.miou, "ci_low": self.ci_low, "ci_high": self.ci_high,
            "per_tree_iou": self.per_tree_iou, "gt_ids": self.gt_ids,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvalReport":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def csv_row(self) -> dict[str, Any]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "precision": self.precision,
                "recall": self.recall, "f1": self.f1, "miou": self.miou,
                "ci_low": "" if self.ci_low is None else self.ci_low,
                "ci_high": "" if self.ci_high is None else self.ci_high}


def reports_to_csv(reports: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    fields = ["method", "tp", "fp", "fn", "precision", "recall", "f1", "miou", "ci_low", "ci_high"]
    w = csv.DictWriter(buf, fields, lineterminator="\n")
    w.writeheader()
    for name, rep in reports.items():
        w.writerow({"method": name, **rep.csv_row()})
    return buf.getvalue()


def reports_to_markdown(reports: dict[str, EvalReport]) -> str:
    lines = ["| Method | F1 | Precision | Recall | mIoU | mIoU 95% CI |",
             "|---|---:|---:|---:|---:|---|"]
    for name, r in reports.items():
        ci = "n/a" if r.ci_low is None else f"[{r.ci_low:.3f}, {r.ci_high:.3f}]"
        lines.append(f"| {name} | {r.f1:.3f} | {r.precision:.3f} | {r.recall:.3f} | {r.miou:.3f} | {ci} |")
    return "\n".join(lines) + "\n"


def write_report(reports: dict[str, EvalReport], out) -> list[Path]:
    """Write ``<out>.json`` plus ``.csv`` and ``.md`` siblings. Returns written paths."""
    out = Path(out)
    base = out.with_suffix("") if out.suffix == ".json" else out
    base.parent.mkdir(parents=True, exist_ok=True)
    paths = [base.with_name(base.name + s) for s in (".json", ".csv", ".md")]
    doc = {name: rep.to_dict() for name, rep in reports.items()}
    paths[0].write_text(json.dumps(doc, indent=1) + "\n")
    paths[1].write_text(reports_to_csv(reports))
    paths[2].write_text(reports_to_markdown(reports))
    return paths


def _window_filter(instances: Sequence[InstanceMask], spec) -> list[InstanceMask]:
    ox, oy = spec.origin
    return [i for i in instances if spec.in_center(i.centroid[0] + ox, i.centroid[1] + oy)]


def evaluate_dataset(pred: AnnotationSet, gt: AnnotationSet, overlap: float = DEFAULT_OVERLAP,
                     mode: str = "iou", window: str = "center", n_boot: int = DEFAULT_BOOTSTRAP,
                     level: float = DEFAULT_LEVEL, seed: int = DEFAULT_SEED, jobs: int = 1) -> EvalReport:
    """Score a prediction set against ground truth, tile by tile.

    ``window="center"`` keeps only instances whose centroid lies in each
    tile's central window; ``"full"`` keeps everything. Matching counts and
    per-tree IoUs are pooled over all tiles before computing metrics.
    """
    if window not in ("center", "full"):
        raise InputError(f"window must be 'center' or 'full', got {window!r}")
    if not np.isclose(pred.cell_size_m, gt.cell_size_m, rtol=1e-9, atol=0.0):
        raise InputError(f"grid mismatch: prediction cell size {pred.cell_size_m} m "
                         f"vs ground truth {gt.cell_size_m} m")
    gt_tiles = {(t.spec.origin, t.spec.size): t for t in gt.tiles}
    pred_tiles = {}
    for t in pred.tiles:
        key = (t.spec.origin, t.spec.size)
        if key not in gt_tiles:
            raise InputError(f"grid mismatch: prediction tile at {t.spec.origin} (size {t.spec.size}) "
                             "has no ground-truth counterpart")
        pred_tiles.setdefault(key, []).extend(t.instances)

    def run(tile):
        key = (tile.spec.origin, tile.spec.size)
        g = tile.instances
        p = pred_tiles.get(key, [])
        if window == "center":
            g, p = _window_filter(g, tile.spec), _window_filter(p, tile.spec)
        m = match_instances(p, g, overlap, mode)
        _, per_tree = mean_iou(m, g)
        return m, per_tree, [i.id for i in g]

    with ThreadPoolExecutor(max(1, jobs)) as pool:
        results = list(pool.map(run, gt.tiles))

    tp = sum(m.tp for m, _, _ in results)
    fp = sum(m.fp for m, _, _ in results)
    fn = sum(m.fn for m, _, _ in results)
    precision, recall, f1 = counts_to_prf1(tp, fp, fn)
    per_tree = [v for _, pt, _ in results for v in pt]
    ids = [i for _, _, gi in results for i in gi]
    miou = float(np.mean(per_tree)) if per_tree else 0.0
    ci_low = ci_high = None
    if per_tree:
        ci_low, ci_high = bootstrap_ci(per_tree, n_boot, level, seed, jobs)
    config = {"overlap": overlap, "mode": mode, "window": window, "bootstrap": n_boot,
              "level": level, "seed": seed}
    return EvalReport(tp, fp, fn, precision, recall, f1, miou, ci_low, ci_high, per_tree, ids, config)
