"""Inference-time filtering of predicted crown instances."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from crownlabel.errors import InputError
from crownlabel.labelset import InstanceMask, intersection_area
from crownlabel.raster import Raster

DEFAULT_MASK_THRESHOLD = 0.5
DEFAULT_SCORE_THRESHOLD = 0.3
DEFAULT_NMS_IOU = 0.3
DEFAULT_IOS = 0.8


def mask_iou(a: InstanceMask, b: InstanceMask) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def box_iou(a: InstanceMask, b: InstanceMask) -> float:
    ax, ay, aw, ah = a.bbox
    bx, by, bw, bh = b.bbox
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union else 0.0


def binarize(soft, mask_thr: float = DEFAULT_MASK_THRESHOLD, id: int = 0,
             offset: tuple[int, int] = (0, 0), score: float | None = None) -> InstanceMask:
    """Turn a per-pixel probability map into a mask (``p >= mask_thr``)."""
    if isinstance(soft, Raster):
        probs = soft.band(0)
        bits = (probs >= mask_thr) & soft.valid(0)
    else:
        bits = np.asarray(soft, dtype=float) >= mask_thr
    if not bits.any():
        raise InputError("empty mask")
    return InstanceMask.from_array(bits, id, offset, score=score)


def threshold_filter(instances: Sequence[InstanceMask],
                     score_thr: float = DEFAULT_SCORE_THRESHOLD) -> list[InstanceMask]:
    """Drop instances scoring below ``score_thr``; scoreless ones pass."""
    return [i for i in instances if i.score is None or i.score >= score_thr]


def _score(inst: InstanceMask) -> float:
    return 1.0 if inst.score is None else inst.score


def nms(instances: Sequence[InstanceMask], iou_thr: float = DEFAULT_NMS_IOU,
        use_boxes: bool = False) -> list[InstanceMask]:
    """Greedy non-maximum suppression.

    Visits instances by descending score (smaller id first on ties) and keeps
    one only if its IoU with every kept instance is below ``iou_thr``. Mask
    IoU by default, box IoU with ``use_boxes``. Survivors keep input order.
    """
    overlap = box_iou if use_boxes else mask_iou
    order = sorted(range(len(instances)), key=lambda i: (-_score(instances[i]), instances[i].id))
    kept: list[int] = []
    for i in order:
        if all(overlap(instances[i], instances[j]) < iou_thr for j in kept):
            kept.append(i)
    keep = set(kept)
    return [inst for i, inst in enumerate(instances) if i in keep]


def containment_filter(instances: Sequence[InstanceMask], ios_thr: float = DEFAULT_IOS) -> list[InstanceMask]:
    """Remove masks largely contained in a bigger one.

    The overlap measure is intersection over the smaller area. Instances are
    visited from the largest area down (higher score, then smaller id, first
    on ties); each is dropped if it overlaps an already kept instance by at
    least ``ios_thr``. Survivors keep input order.
    """
    order = sorted(range(len(instances)),
                   key=lambda i: (-instances[i].area, -_score(instances[i]), instances[i].id))
    kept: list[int] = []
    for i in order:
        a = instances[i]
        ok = True
        for j in kept:
            b = instances[j]
            small = min(a.area, b.area)
            if small and intersection_area(a, b) / small >= ios_thr:
                ok = False
                break
        if ok:
            kept.append(i)
    keep = set(kept)
    return [inst for i, inst in enumerate(instances) if i in keep]


def postfilter(instances: Sequence[InstanceMask], score_thr: float = DEFAULT_SCORE_THRESHOLD,
               nms_iou: float = DEFAULT_NMS_IOU, ios_thr: float | None = DEFAULT_IOS,
               use_boxes: bool = False) -> list[InstanceMask]:
    """Score gate, then NMS, then (unless ``ios_thr`` is None) the containment filter."""
    out = nms(threshold_filter(instances, score_thr), nms_iou, use_boxes)
    if ios_thr is not None:
        out = containment_filter(out, ios_thr)
    return out
