"""Reproducible experiment drivers: gradient suite, mechanism comparison,
full-supervision bound, and zero-shot composition transfer.

These back both the command-line entry points and the acceptance tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .encoders import EncoderConfig
from .evaluation import evaluate_compositions, evaluate_scenes
from .metrics import mean_iou
from .objectives import dice_loss, soft_margin_loss
from .pooling import PoolingConfig, image_text_scores
from .synthbench import (
    DEFAULT_HOLDOUT,
    SceneConfig,
    Vocabulary,
    holdout_split,
    make_scenes,
    scene_stream,
)
from .trainer import TrainConfig, TrainResult, train_full, train_weak


# -- gradient suite ------------------------------------------------------------


@dataclass
class GradCase:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _score_pipeline(mechanism: str):
    """Similarity computation through pooled scores, reduced to a scalar."""
    pool_cfg = PoolingConfig(mechanism=mechanism)

    def fn(x, y, wi, wt, log_t, mix):
        from .encoders import ProjectionParams, similarity_matrix

        proj = ProjectionParams(image_proj=wi, text_proj=wt, log_temperature=log_t)
        sims = similarity_matrix(x, y, proj)
        scores, _ = image_text_scores(sims, pool_cfg)
        return (scores.z * mix).sum()

    return fn


def run_gradient_suite(points: int = 20, step: float = 1e-5,
                       tolerance: float = 1e-5, seed: int = 0) -> list[GradCase]:
    """Finite-difference checks of every differentiable pipeline.

    Each case is evaluated at ``points`` random configurations; the
    reported error is the worst across points and coordinates.
    """
    rng = np.random.default_rng(seed)
    cases: list[GradCase] = []

    def check(name, fn, make_inputs, tol=tolerance):
        worst = 0.0
        for _ in range(points):
            worst = max(worst, ad.gradcheck(fn, make_inputs(), step=step))
        cases.append(GradCase(name=name, max_error=worst, tolerance=tol))

    def t(shape, scale=1.0, offset=0.0):
        return ad.Tensor(offset + scale * rng.normal(size=shape))

    # primitive ops, each through a smooth scalar head
    check("add", lambda a, b: ((a + b) ** 2).sum(), lambda: [t((3, 4)), t((3, 4))])
    check("subtract", lambda a, b: ((a - b) ** 3).sum(), lambda: [t((3, 4)), t((3, 4))])
    check("multiply", lambda a, b: (a * b).sum(), lambda: [t((3, 4)), t((3, 4))])
    check("divide", lambda a, b: (a / b).sum(), lambda: [t((3, 4)), t((3, 4), 0.5, 3.0)])
    check("matmul", lambda a, b: ((a @ b) ** 2).sum(), lambda: [t((3, 4)), t((4, 2))])
    check("exp", lambda a: ad.exp(a).sum(), lambda: [t((3, 4))])
    check("log", lambda a: ad.log(a).sum(), lambda: [t((3, 4), 0.5, 3.0)])
    check("power", lambda a: (a ** 2.5).sum(), lambda: [t((3, 4), 0.3, 2.0)])
    check("sigmoid", lambda a: ad.sigmoid(a).sum(), lambda: [t((3, 4), 2.0)])
    check("log_sigmoid", lambda a: ad.log_sigmoid(a).sum(), lambda: [t((3, 4), 3.0)])
    check("gelu", lambda a: ad.gelu(a).sum(), lambda: [t((3, 4), 2.0)])
    check("softmax", lambda a: (ad.softmax(a, axis=1) ** 2).sum(), lambda: [t((3, 4), 2.0)])
    check("sum_axis", lambda a: (a.sum(axis=0) ** 2).sum(), lambda: [t((3, 4))])
    check("max_axis", lambda a: (a.max(axis=0) ** 2).sum(), lambda: [t((5, 4), 3.0)])
    check("transpose", lambda a: ((a.T @ a) ** 2).sum(), lambda: [t((3, 4))])
    check("reshape", lambda a: (a.reshape(2, 6) ** 2).sum(), lambda: [t((3, 4))])
    check("slice", lambda a: (a[1:, :2] ** 2).sum(), lambda: [t((3, 4))])
    check(
        "concatenate",
        lambda a, b: (ad.concatenate([a, b], axis=1) ** 2).sum(),
        lambda: [t((3, 2)), t((3, 3))],
    )
    check(
        "layer_norm",
        lambda x, g, b: (ad.layer_norm(x, g, b) ** 2).sum(),
        lambda: [t((3, 5)), t(5, 0.3, 1.0), t(5, 0.3)],
    )
    check(
        "embedding",
        lambda tab: (ad.embedding(tab, [0, 2, 2, 1]) ** 2).sum(),
        lambda: [t((4, 5))],
    )
    check(
        "broadcast",
        lambda a: (ad.broadcast_to(a, (4, 3)) ** 2).sum(),
        lambda: [t((1, 3))],
    )

    # full score pipelines: similarities from raw tokens through final scores
    n, l, d_in, d = 6, 3, 5, 4
    for mech in ("spa", "mpa"):
        def make_inputs():
            return [
                t((n, d_in)), t((l, d_in)),
                t((d_in, d), 0.5), t((d_in, d), 0.5),
                ad.Tensor(np.log(0.3) + 0.1 * rng.normal()),
                t(l, 0.7),
            ]

        check(f"score_pipeline_{mech}", _score_pipeline(mech), make_inputs)

    labels = rng.uniform(0, 1, size=6).round()
    check(
        "soft_margin_loss",
        lambda z: soft_margin_loss(z, labels),
        lambda: [t(6, 2.0)],
    )

    gt = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
    check(
        "dice_loss",
        lambda m: dice_loss(m, gt),
        lambda: [ad.Tensor(rng.uniform(0.05, 0.95, size=(8, 8)))],
    )

    return cases


# -- comparison experiment -------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Shared settings for the desk-scale training experiments."""

    seeds: tuple[int, ...] = (0, 1, 2)
    iters: int = 2000
    full_iters: int = 400
    batch_size: int = 8
    weak_lr: float = 0.2
    full_lr: float = 2e-3
    eval_scenes: int = 100
    eval_seed: int = 90210
    data_seed_offset: int = 1_000_003
    scene_config: SceneConfig = field(default_factory=SceneConfig)
    encoder_config: EncoderConfig = field(default_factory=EncoderConfig)


def train_one(mechanism: str, seed: int, xc: ExperimentConfig,
              mode: str = "weak") -> TrainResult:
    if mode == "weak":
        cfg = TrainConfig(mode="weak", mechanism=mechanism, base_lr=xc.weak_lr,
                          total_iters=xc.iters, batch_size=xc.batch_size, seed=seed)
        stream = scene_stream(xc.scene_config, seed + xc.data_seed_offset,
                              cfg.batch_size)
        return train_weak(cfg, stream, encoder_cfg=xc.encoder_config)
    cfg = TrainConfig(mode="full", mechanism=mechanism, base_lr=xc.full_lr,
                      total_iters=xc.full_iters, batch_size=xc.batch_size, seed=seed)
    stream = scene_stream(xc.scene_config, seed + xc.data_seed_offset,
                          cfg.batch_size)
    return train_full(cfg, stream, encoder_cfg=xc.encoder_config)


def run_comparison(xc: ExperimentConfig | None = None,
                   mechanisms=("gmp", "gap", "spa", "mpa"),
                   progress=None) -> dict:
    """Train every mechanism with shared seeds and evaluate on one split.

    Returns ``{"per_seed": {mech: {seed: miou}}, "mean": {mech: miou},
    "records": {(mech, seed): [EvalRecord]}}``.
    """
    xc = xc or ExperimentConfig()
    vocab = Vocabulary()
    eval_split = make_scenes(xc.scene_config, xc.eval_seed, xc.eval_scenes)
    per_seed: dict[str, dict[int, float]] = {m: {} for m in mechanisms}
    records: dict[tuple[str, int], list] = {}
    models: dict[tuple[str, int], TrainResult] = {}
    for mechanism in mechanisms:
        for seed in xc.seeds:
            result = train_one(mechanism, seed, xc)
            recs = evaluate_scenes(result.model, eval_split, mechanism, vocab,
                                   TrainConfig(mechanism=mechanism).pooling())
            per_seed[mechanism][seed] = mean_iou(recs)
            records[(mechanism, seed)] = recs
            models[(mechanism, seed)] = result
            if progress:
                progress(mechanism, seed, per_seed[mechanism][seed])
    means = {m: float(np.mean(list(vals.values()))) for m, vals in per_seed.items()}
    return {"per_seed": per_seed, "mean": means, "records": records,
            "models": models, "eval_split": eval_split, "vocab": vocab}


def run_full_supervision(xc: ExperimentConfig | None = None, progress=None) -> dict:
    """Dice-trained upper bound, evaluated on the same split as the comparison."""
    xc = xc or ExperimentConfig()
    vocab = Vocabulary()
    eval_split = make_scenes(xc.scene_config, xc.eval_seed, xc.eval_scenes)
    per_seed: dict[int, float] = {}
    records = {}
    for seed in xc.seeds:
        result = train_one("mpa", seed, xc, mode="full")
        recs = evaluate_scenes(result.model, eval_split, "mpa", vocab)
        per_seed[seed] = mean_iou(recs)
        records[seed] = recs
        if progress:
            progress("full", seed, per_seed[seed])
    return {"per_seed": per_seed, "mean": float(np.mean(list(per_seed.values()))),
            "records": records}


def run_zero_shot(xc: ExperimentConfig | None = None,
                  pairs=DEFAULT_HOLDOUT, progress=None) -> dict:
    """Train on the reduced grammar, then query held-out compositions.

    Reports per-seed mean IoU on seen-composition scenes versus scenes
    queried only with the held-out (color, shape) phrases.
    """
    xc = xc or ExperimentConfig()
    vocab = Vocabulary()
    train_cfg_scenes, eval_cfg_scenes = holdout_split(xc.scene_config, pairs)
    seen_split = make_scenes(train_cfg_scenes, xc.eval_seed, xc.eval_scenes)
    heldout_split_scenes = make_scenes(eval_cfg_scenes, xc.eval_seed + 1,
                                       xc.eval_scenes)
    xc_train = replace(xc, scene_config=train_cfg_scenes)
    out: dict[int, dict[str, float]] = {}
    for seed in xc.seeds:
        result = train_one("mpa", seed, xc_train)
        seen = evaluate_scenes(result.model, seen_split, "mpa", vocab)
        held = evaluate_compositions(result.model, heldout_split_scenes, pairs, vocab)
        out[seed] = {"seen": mean_iou(seen), "heldout": mean_iou(held)}
        if progress:
            progress("zero-shot", seed, out[seed]["heldout"])
    return {
        "per_seed": out,
        "seen_mean": float(np.mean([v["seen"] for v in out.values()])),
        "heldout_mean": float(np.mean([v["heldout"] for v in out.values()])),
        "pairs": [list(p) for p in pairs],
    }
