"""weakseg: weakly-supervised referring-expression segmentation at desk scale.

A float64 autodiff engine powers toy dual encoders whose patch-text
similarities are pooled to image-level scores (average, max, or mask-based
single-/multi-label assignment with a size term), trained from image-level
labels only, and decoded back to pixel masks.  A procedural benchmark of
colored shapes provides exact ground truth for evaluation.
"""

__version__ = "0.1.0"

from .autodiff import Tensor, gradcheck
from .encoders import EncoderConfig, GroundingModel, similarity_matrix
from .metrics import iou, mean_iou
from .objectives import dice_loss, soft_margin_loss
from .pooling import (
    PoolingConfig,
    ScoreVector,
    gap_scores,
    gmp_scores,
    gwp_scores,
    image_text_scores,
    mpa_masks,
    size_scores,
    spa_masks,
)
from .synthbench import SceneConfig, SynthScene, Vocabulary, generate_scene
from .trainer import TrainConfig, train_full, train_weak

__all__ = [
    "Tensor", "gradcheck",
    "EncoderConfig", "GroundingModel", "similarity_matrix",
    "PoolingConfig", "ScoreVector",
    "gap_scores", "gmp_scores", "gwp_scores", "spa_masks", "mpa_masks",
    "size_scores", "image_text_scores",
    "soft_margin_loss", "dice_loss",
    "SceneConfig", "SynthScene", "Vocabulary", "generate_scene",
    "TrainConfig", "train_weak", "train_full",
    "iou", "mean_iou",
    "__version__",
]
