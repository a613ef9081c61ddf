"""Training objectives: weak multi-label classification and full-supervision Dice."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, log_sigmoid, sum_reduce

DICE_EPS = 1e-6


def soft_margin_loss(z: Tensor, labels) -> Tensor:
    """Multi-label soft-margin classification loss, summed over expressions.

    ``labels`` holds per-expression presence targets in [0, 1]; fractional
    values are allowed (soft ground truth).  Uses the stable log-sigmoid
    form, so saturated scores do not overflow.  Batched inputs (B, L) sum
    over every entry, i.e. over expressions and over the batch.
    """
    target = np.asarray(labels, dtype=np.float64)
    if z.data.shape != target.shape:
        raise ValueError(f"score shape {z.data.shape} does not match labels {target.shape}")
    if np.any(target < 0) or np.any(target > 1):
        raise ValueError("labels must lie in [0, 1]")
    t = Tensor(target)
    per_expr = -(t * log_sigmoid(z)) - (1.0 - t) * log_sigmoid(-z)
    return sum_reduce(per_expr)


def dice_loss(pred: Tensor, target) -> Tensor:
    """``1 - 2 |pred * target| / (|pred| + |target| + eps)`` over all entries.

    ``pred`` is a soft mask in [0, 1], ``target`` a binary mask of the same
    shape.  Two empty masks score 0 by convention.
    """
    gt = np.asarray(target, dtype=np.float64)
    if gt.shape != pred.data.shape:
        raise ValueError(f"mask shape {pred.data.shape} does not match target {gt.shape}")
    if np.any(pred.data < 0) or np.any(pred.data > 1):
        raise ValueError("predicted mask entries must lie in [0, 1]")
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("target mask must be binary")
    if pred.data.sum() == 0 and gt.sum() == 0:
        return Tensor(0.0)
    intersection = sum_reduce(pred * Tensor(gt))
    total = sum_reduce(pred) + float(gt.sum()) + DICE_EPS
    return 1.0 - 2.0 * intersection / total
