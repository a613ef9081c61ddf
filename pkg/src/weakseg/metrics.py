"""Intersection-over-union scoring over (image, expression) pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EvalRecord:
    """One (image, expression) pair: pixel counts and the resulting IoU."""

    intersection: int
    union: int
    iou: float
    kind: str = ""


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """|pred & gt| / |pred | gt|; two empty masks score 1 by convention."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def make_record(pred: np.ndarray, gt: np.ndarray, kind: str = "") -> EvalRecord:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    inter = int(np.logical_and(pred, gt).sum())
    union = int(np.logical_or(pred, gt).sum())
    return EvalRecord(intersection=inter, union=union,
                      iou=1.0 if union == 0 else inter / union, kind=kind)


def mean_iou(records) -> float:
    """Unweighted mean over pairs: sizes do not reweight the average."""
    records = list(records)
    if not records:
        raise ValueError("cannot average an empty record list")
    return float(np.mean([r.iou for r in records]))


def breakdown(records) -> dict[str, float]:
    """Mean IoU per record kind."""
    kinds: dict[str, list[float]] = {}
    for r in records:
        kinds.setdefault(r.kind or "all", []).append(r.iou)
    return {k: float(np.mean(v)) for k, v in sorted(kinds.items())}
