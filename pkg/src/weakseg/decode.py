"""Turn patch-level masks into pixel-level binary segmentations.

All functions here operate on plain numpy arrays (inference only).  The
patch column is rearranged into its 2-D grid, bilinearly interpolated to
the image resolution with half-pixel centers, then binarized by the rule
of the mechanism that produced it: a fixed threshold for multi-label
masks, an argmax against the background for single-label masks, and a
normalized-activation cutoff for plain pooling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MPA_THRESHOLD = 0.5  # sigmoid(0): the mask value at exactly the background logit
CAM_BETA_DEFAULT = 0.4


@dataclass
class PixelMasks:
    """Per-expression soft map in [0, 1] and its binarized counterpart."""

    index: int
    floatmap: np.ndarray
    binary: np.ndarray


def bilinear_weights(src: int, dst: int) -> np.ndarray:
    """Interpolation matrix W (dst x src) for half-pixel-center sampling.

    Output coordinate u samples the source at ``(u + 0.5) * src/dst - 0.5``,
    clamped to ``[0, src - 1]``; each row blends the two bracketing samples.
    """
    if dst < 1 or src < 1:
        raise ValueError("sizes must be positive")
    weights = np.zeros((dst, src))
    coords = np.clip((np.arange(dst) + 0.5) * (src / dst) - 0.5, 0.0, src - 1.0)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    weights[np.arange(dst), lo] += 1.0 - frac
    weights[np.arange(dst), hi] += frac
    return weights


def bilinear_upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize a 2-D grid to (height, width) with half-pixel-center bilinear."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("expected a 2-D grid")
    if height < 1 or width < 1:
        raise ValueError("target size must be positive")
    rows = bilinear_weights(grid.shape[0], height)
    cols = bilinear_weights(grid.shape[1], width)
    return rows @ grid @ cols.T


def column_to_grid(column: np.ndarray, grid_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Rearrange a length-N patch column into its row-major 2-D grid."""
    column = np.asarray(column)
    n = column.shape[0]
    if grid_shape is None:
        side = math.isqrt(n)
        if side * side != n:
            raise ValueError(f"{n} patches do not form a square grid; pass grid_shape")
        grid_shape = (side, side)
    if grid_shape[0] * grid_shape[1] != n:
        raise ValueError(f"grid {grid_shape} does not hold {n} patches")
    return column.reshape(grid_shape)


def decode_mpa(masks: np.ndarray, s_bg: float, height: int, width: int,
               grid_shape: tuple[int, int] | None = None) -> list[PixelMasks]:
    """Decode multi-label masks: upsample each column, cut at sigmoid(0).

    ``s_bg`` is accepted for interface symmetry; multi-label mask values
    are already sigmoid(s - s_bg), so the cut sits at 0.5 regardless.
    """
    del s_bg
    out = []
    for j in range(masks.shape[1]):
        fm = bilinear_upsample(column_to_grid(masks[:, j], grid_shape), height, width)
        out.append(PixelMasks(index=j, floatmap=fm, binary=fm > MPA_THRESHOLD))
    return out


def decode_spa(masks_with_bg: np.ndarray, height: int, width: int,
               grid_shape: tuple[int, int] | None = None) -> list[PixelMasks]:
    """Decode single-label masks (background in column 0) by pixel argmax.

    Each pixel is assigned to the highest upsampled column; ties go to the
    lowest column index, so the background wins exact ties.  The returned
    expression masks are therefore pairwise disjoint.
    """
    upsampled = np.stack([
        bilinear_upsample(column_to_grid(masks_with_bg[:, j], grid_shape), height, width)
        for j in range(masks_with_bg.shape[1])
    ])
    assignment = np.argmax(upsampled, axis=0)
    return [
        PixelMasks(index=j - 1, floatmap=upsampled[j], binary=assignment == j)
        for j in range(1, masks_with_bg.shape[1])
    ]


def decode_cam(similarities: np.ndarray, beta: float, height: int, width: int,
               grid_shape: tuple[int, int] | None = None) -> list[PixelMasks]:
    """Activation-map decoding for plain average/max pooling.

    Each column is rectified and divided by its own maximum (empty when no
    entry is positive), upsampled, and binarized at ``beta``.
    """
    if not (0.0 < beta < 1.0):
        raise ValueError("beta must lie in (0, 1)")
    out = []
    for j in range(similarities.shape[1]):
        act = np.maximum(similarities[:, j], 0.0)
        peak = act.max() if act.size else 0.0
        if peak > 0:
            act = act / peak
        fm = bilinear_upsample(column_to_grid(act, grid_shape), height, width)
        out.append(PixelMasks(index=j, floatmap=fm, binary=fm > beta))
    return out


def merge_masks(masks: list[PixelMasks], index: int = 0) -> PixelMasks:
    """Pointwise union: byte OR on the binary maps, max on the float maps."""
    if not masks:
        raise ValueError("nothing to merge")
    shape = masks[0].binary.shape
    for m in masks[1:]:
        if m.binary.shape != shape:
            raise ValueError("mask sizes differ")
    floatmap = np.maximum.reduce([m.floatmap for m in masks])
    binary = np.logical_or.reduce([m.binary for m in masks])
    return PixelMasks(index=index, floatmap=floatmap, binary=binary)
