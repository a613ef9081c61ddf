"""Reduce a patch-text similarity matrix to per-expression image scores.

Four mechanisms are supported.  Global average pooling (``gap``) and
global max pooling (``gmp``) collapse each similarity column directly.
The assignment mechanisms first turn similarities into soft masks --
``spa`` with a softmax across expressions plus a background logit
(masks compete, one label per patch), ``mpa`` with an independent
per-entry sigmoid against the background logit (masks may overlap) --
and then score each expression as a mask-weighted similarity average
plus a size term that rewards mask completeness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concatenate, log, max_reduce, sigmoid, softmax, sum_reduce

MECHANISMS = ("gap", "gmp", "spa", "mpa")


@dataclass
class PoolingConfig:
    """Mechanism choice plus the scoring hyperparameters.

    ``epsilon`` guards the mask-weight normalization, ``lam`` and ``p``
    shape the size term, ``s_bg`` is the fixed background logit.
    """

    mechanism: str = "mpa"
    epsilon: float = 1e-5
    lam: float = 0.01
    p: float = 5.0
    s_bg: float = 0.0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown pooling mechanism {self.mechanism!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.lam <= 1.0):
            raise ValueError("lam must lie in (0, 1]")
        if self.p < 0:
            raise ValueError("p must be non-negative")


@dataclass
class ScoreVector:
    """Per-expression image-level scores, with the weighted-pool and size
    components kept separately when an assignment mechanism produced them."""

    z: Tensor
    gwp: Tensor | None = None
    size: Tensor | None = None


def _check_matrix(s: Tensor) -> Tensor:
    # patches along axis -2, expressions along axis -1; leading axes batch
    if s.data.ndim < 2 or s.data.size == 0:
        raise ValueError("similarity matrix must be non-empty with ndim >= 2")
    return s


def gap_scores(s: Tensor) -> ScoreVector:
    """Average each expression's similarities over all patches."""
    _check_matrix(s)
    return ScoreVector(z=s.mean(axis=-2))


def gmp_scores(s: Tensor) -> ScoreVector:
    """Keep each expression's single best patch similarity."""
    _check_matrix(s)
    return ScoreVector(z=max_reduce(s, axis=-2))


def spa_masks(s: Tensor, s_bg: float = 0.0) -> Tensor:
    """Single-label assignment: softmax across expressions and background.

    Returns an N x (L+1) matrix whose column 0 is the background; each row
    sums to one, so expression masks are softly exclusive.
    """
    _check_matrix(s)
    bg = Tensor(np.full(s.data.shape[:-1] + (1,), float(s_bg)))
    return softmax(concatenate([bg, s], axis=-1), axis=-1)


def mpa_masks(s: Tensor, s_bg: float = 0.0) -> Tensor:
    """Multi-label assignment: per-entry sigmoid against the background logit.

    Entries are independent across expressions, so masks may overlap.
    """
    _check_matrix(s)
    return sigmoid(s - float(s_bg))


def gwp_scores(s: Tensor, masks: Tensor, epsilon: float = 1e-5) -> ScoreVector:
    """Similarity average weighted by spatially normalized mask scores."""
    _check_matrix(s)
    if masks.data.shape != s.data.shape:
        raise ValueError(f"mask shape {masks.data.shape} does not match similarities {s.data.shape}")
    if np.any(masks.data < 0):
        raise ValueError("mask entries must be non-negative")
    weights = masks / (sum_reduce(masks, axis=-2, keepdims=True) + float(epsilon))
    return ScoreVector(z=sum_reduce(weights * s, axis=-2))


def size_scores(masks: Tensor, lam: float, p: float) -> ScoreVector:
    """Completeness term ``(1 - mean_mask)^p * log(lam + mean_mask)``.

    Strongly negative for near-empty masks, zero for full ones; ``lam``
    bounds the penalty, ``p`` focuses it on incomplete masks.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    if np.any(masks.data < 0) or np.any(masks.data > 1):
        raise ValueError("mask entries must lie in [0, 1]")
    mean_mask = masks.mean(axis=-2)
    return ScoreVector(z=(1.0 - mean_mask) ** float(p) * log(mean_mask + float(lam)))


def image_text_scores(s: Tensor, cfg: PoolingConfig) -> tuple[ScoreVector, Tensor | None]:
    """Dispatch on the configured mechanism.

    For ``gap``/``gmp`` the returned mask is ``None`` (inference derives
    activation maps from the similarities instead).  For ``spa`` the full
    mask including the background column is returned so decoding can run
    the same argmax; its expression columns feed the scores.
    """
    _check_matrix(s)
    if cfg.mechanism == "gap":
        return gap_scores(s), None
    if cfg.mechanism == "gmp":
        return gmp_scores(s), None
    if cfg.mechanism == "spa":
        full = spa_masks(s, cfg.s_bg)
        expr = full[..., 1:]
    else:
        full = mpa_masks(s, cfg.s_bg)
        expr = full
    z_gwp = gwp_scores(s, expr, cfg.epsilon).z
    z_size = size_scores(expr, cfg.lam, cfg.p).z
    return ScoreVector(z=z_gwp + z_size, gwp=z_gwp, size=z_size), full
