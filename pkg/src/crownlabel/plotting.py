"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "svg.hashsalt": "crownlabel",
}


def _save(fig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date metadata: outputs must be byte-reproducible
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    return p


def ndvi_histogram(means: Mapping[int, float], threshold: float, path, bins: int = 40) -> Path:
    """Distribution of per-segment mean index with the cut-off as a dashed line."""
    values = [v for v in means.values() if math.isfinite(v)]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.hist(values, bins=bins, range=(-1.0, 1.0), color="0.55", edgecolor="white", linewidth=0.4)
        ax.axvline(threshold, color="black", linestyle="--", linewidth=1.0)
        ax.set_xlabel("Mean NDVI of segment")
        ax.set_ylabel("Segments")
        fig.tight_layout()
        return _save(fig, path)


def iou_histogram(per_tree_iou, miou: float, ci: tuple[float, float] | None, path, title: str = "") -> Path:
    """Per-tree IoU distribution, with the mean and its bootstrap interval shaded."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.hist(per_tree_iou, bins=20, range=(0.0, 1.0), color="0.55", edgecolor="white", linewidth=0.4)
        if ci is not None and ci[0] is not None:
            ax.axvspan(ci[0], ci[1], color="tab:blue", alpha=0.2, linewidth=0)
        ax.axvline(miou, color="tab:blue", linewidth=1.2)
        ax.set_xlabel("IoU with matched prediction")
        ax.set_ylabel("Ground-truth trees")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def method_comparison(reports: Mapping[str, object], path) -> Path:
    """mIoU per method with 95% interval error bars."""
    names = list(reports)
    miou = [reports[n].miou for n in names]
    lo = [reports[n].miou - (reports[n].ci_low if reports[n].ci_low is not None else reports[n].miou)
          for n in names]
    hi = [(reports[n].ci_high if reports[n].ci_high is not None else reports[n].miou) - reports[n].miou
          for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.0))
        ax.bar(range(len(names)), miou, yerr=[lo, hi], color="0.6", capsize=3, width=0.6)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("mIoU")
        fig.tight_layout()
        return _save(fig, path)
