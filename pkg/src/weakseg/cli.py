"""Command-line entry point.

Subcommands: ``gen-data`` (emit a dataset directory), ``train`` (weak or
full supervision), ``eval`` (checkpoint -> JSON report + mask files),
``segment`` (checkpoint + image + expressions -> mask files), ``gradcheck``
(gradient suite, exit 0 iff everything passes) and ``compare`` (train all
four pooling mechanisms with shared seeds and print the mIoU table).

Configuration comes from an optional UTF-8 ``key = value`` file plus
``--set key=value`` overrides; unknown keys are rejected and every value is
echoed into the run manifest.  Exit codes: 0 success, 1 failed check,
2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .encoders import EncoderConfig
from .evaluation import predict_pixel_masks, report_from_records
from .experiments import ExperimentConfig, run_comparison, run_gradient_suite
from .metrics import make_record
from .netpbm import read_ppm, write_pgm
from .pooling import image_text_scores
from .synthbench import (
    SceneConfig,
    Vocabulary,
    dump_dataset,
    expression_kind,
    make_scenes,
    scene_stream,
)
from .trainer import (
    TrainConfig,
    config_hash,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    """Union of every tunable knob; flat keys for the config file."""

    # training
    mode: str = "weak"
    mechanism: str = "mpa"
    base_lr: float = 0.2
    total_iters: int = 2000
    batch_size: int = 8
    lam: float = 0.01
    p: float = 5.0
    epsilon: float = 1e-5
    seed: int = 0
    weight_decay: float = 1e-4
    labels: str = "identity"
    data_seed_offset: int = 1_000_003
    # scene generation
    image_size: int = 64
    patch_size: int = 8
    min_objects: int = 2
    max_objects: int = 5
    num_scenes: int = 16
    # encoder
    dim_image: int = 64
    dim_text: int = 64
    dim_embed: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    max_text_len: int = 8
    init_temperature: float = 0.07
    # evaluation / inference
    eval_seed: int = 90210
    eval_scenes: int = 100
    cam_beta: float = 0.4
    # compare experiment
    compare_seeds: str = "0,1,2"
    full_iters: int = 400
    full_lr: float = 2e-3

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode, mechanism=self.mechanism, base_lr=self.base_lr,
            total_iters=self.total_iters, batch_size=self.batch_size,
            lam=self.lam, p=self.p, epsilon=self.epsilon, seed=self.seed,
            weight_decay=self.weight_decay, labels=self.labels,
        )

    def scene_config(self) -> SceneConfig:
        return SceneConfig(height=self.image_size, width=self.image_size,
                           patch_size=self.patch_size,
                           min_objects=self.min_objects,
                           max_objects=self.max_objects)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size, patch_size=self.patch_size,
            dim_image=self.dim_image, dim_text=self.dim_text,
            dim_embed=self.dim_embed, depth=self.depth, heads=self.heads,
            mlp_ratio=self.mlp_ratio, max_text_len=self.max_text_len,
            init_temperature=self.init_temperature,
        )

    def echo(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_CASTS = {"str": str, "int": int, "float": float}


def parse_config_file(path) -> dict[str, str]:
    """Line-oriented ``key = value``; blank lines and ``#`` comments allowed."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def build_run_config(config_path, overrides) -> RunConfig:
    values: dict[str, str] = {}
    if config_path:
        values.update(parse_config_file(config_path))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        values[key.strip()] = value.strip()
    kwargs = {}
    for key, value in values.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        caster = _CASTS[_FIELDS[key]] if isinstance(_FIELDS[key], str) else _FIELDS[key]
        try:
            kwargs[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def write_manifest(outdir, command: str, rc: RunConfig, extra: dict | None = None) -> dict:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": rc.seed,
        "config": rc.echo(),
        "config_hash": config_hash(rc.train_config(), rc.encoder_config()),
    }
    if extra:
        manifest.update(extra)
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    rc = build_run_config(args.config, args.set)
    scenes = make_scenes(rc.scene_config(), rc.seed, rc.num_scenes)
    dump_dataset(args.out, scenes, Vocabulary())
    write_manifest(args.out, "gen-data", rc, {"scenes": rc.num_scenes})
    print(f"wrote {rc.num_scenes} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = build_run_config(args.config, args.set)
    cfg = rc.train_config()
    stream = scene_stream(rc.scene_config(), rc.seed + rc.data_seed_offset,
                          rc.batch_size, flip=cfg.mode == "weak")
    result = train(cfg, stream, encoder_cfg=rc.encoder_config())
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.tseg")
    save_checkpoint(result.checkpoint, ckpt_path)
    with open(os.path.join(args.out, "loss_log.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{v:.10f}\n" for v in result.losses)
    write_manifest(args.out, "train", rc, {
        "checkpoint": "checkpoint.tseg",
        "final_loss": result.losses[-1],
        "iterations": result.checkpoint.iteration,
    })
    print(f"trained {cfg.mode}/{cfg.mechanism} for {cfg.total_iters} iterations; "
          f"final loss {result.losses[-1]:.4f}; checkpoint at {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    rc = build_run_config(args.config, args.set)
    ckpt = load_checkpoint(args.checkpoint)
    vocab = Vocabulary()
    model = model_from_checkpoint(ckpt, vocab)
    scene_cfg = SceneConfig(height=ckpt.encoder.image_size,
                            width=ckpt.encoder.image_size,
                            patch_size=ckpt.encoder.patch_size,
                            min_objects=rc.min_objects,
                            max_objects=rc.max_objects)
    scenes = make_scenes(scene_cfg, rc.eval_seed, rc.eval_scenes)
    mechanism = ckpt.config.mechanism
    pool_cfg = ckpt.config.pooling()
    records = []
    mask_dir = os.path.join(args.out, "masks")
    os.makedirs(mask_dir, exist_ok=True)
    for i, scene in enumerate(scenes):
        preds = predict_pixel_masks(model, scene, mechanism, vocab, pool_cfg,
                                    cam_beta=rc.cam_beta)
        for j, (pred, expr, gt) in enumerate(
                zip(preds, scene.expressions, scene.gt_masks)):
            records.append(make_record(pred.binary, gt, kind=expression_kind(expr)))
            write_pgm(os.path.join(mask_dir, f"scene_{i:04d}_expr_{j:02d}.pgm"),
                      pred.binary)
    cfg_hash = config_hash(ckpt.config, ckpt.encoder)
    report = report_from_records({mechanism: records}, seed=rc.eval_seed,
                                 cfg_hash=cfg_hash,
                                 extra={"config_echo": rc.echo(),
                                        "checkpoint_iteration": ckpt.iteration})
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    write_manifest(args.out, "eval", rc, {"config_hash_checkpoint": cfg_hash})
    miou = report["mechanisms"][mechanism]["mean_iou"]
    print(f"{mechanism}: mIoU {miou:.4f} over {len(records)} pairs")
    return 0


def cmd_segment(args) -> int:
    rc = build_run_config(args.config, args.set)
    ckpt = load_checkpoint(args.checkpoint)
    vocab = Vocabulary()
    model = model_from_checkpoint(ckpt, vocab)
    image = read_ppm(args.image)
    expressions = [tuple(e.split()) for e in args.expr]
    if not expressions:
        raise ConfigError("segment needs at least one --expr")
    patch_tokens = model.encode_image(image)
    expr_tokens = model.encode_expressions([vocab.encode(e) for e in expressions])
    sims = model.similarity(patch_tokens, expr_tokens)
    pool_cfg = ckpt.config.pooling()
    scores, _ = image_text_scores(sims, pool_cfg)
    height, width = image.shape[:2]
    grid = (height // ckpt.encoder.patch_size, width // ckpt.encoder.patch_size)

    from .decode import decode_cam, decode_mpa, decode_spa
    from .pooling import mpa_masks, spa_masks

    mechanism = ckpt.config.mechanism
    if mechanism in ("gap", "gmp"):
        preds = decode_cam(sims.data, rc.cam_beta, height, width, grid)
    elif mechanism == "spa":
        preds = decode_spa(spa_masks(sims, pool_cfg.s_bg).data, height, width, grid)
    else:
        preds = decode_mpa(mpa_masks(sims, pool_cfg.s_bg).data, pool_cfg.s_bg,
                           height, width, grid)
    os.makedirs(args.out, exist_ok=True)
    entries = []
    for j, (pred, expr) in enumerate(zip(preds, expressions)):
        score = float(scores.z.data[j])
        absent = score < 0
        binary = np.zeros_like(pred.binary) if absent else pred.binary
        name = f"mask_{j:02d}.pgm"
        write_pgm(os.path.join(args.out, name), binary)
        entries.append({"expression": " ".join(expr), "score": score,
                        "absent": bool(absent), "mask": name,
                        "area": int(binary.sum())})
        marker = " (absent)" if absent else ""
        print(f"{' '.join(expr)}: score {score:+.4f}{marker}")
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump({"mechanism": mechanism, "expressions": entries,
                   "config_hash": config_hash(ckpt.config, ckpt.encoder)},
                  fh, indent=2, sort_keys=True)
    write_manifest(args.out, "segment", rc)
    return 0


def cmd_gradcheck(args) -> int:
    cases = run_gradient_suite(points=args.points)
    failed = 0
    for case in cases:
        status = "ok" if case.passed else "FAIL"
        print(f"{status:4s} {case.name:24s} max rel err {case.max_error:.3e} "
              f"(tol {case.tolerance:.0e})")
        failed += 0 if case.passed else 1
    if failed:
        print(f"{failed}/{len(cases)} gradient checks failed", file=sys.stderr)
        return 1
    print(f"all {len(cases)} gradient checks passed")
    return 0


def cmd_compare(args) -> int:
    rc = build_run_config(args.config, args.set)
    try:
        seeds = tuple(int(s) for s in rc.compare_seeds.split(","))
    except ValueError:
        raise ConfigError(f"bad compare_seeds {rc.compare_seeds!r}") from None
    xc = ExperimentConfig(
        seeds=seeds, iters=rc.total_iters, full_iters=rc.full_iters,
        batch_size=rc.batch_size, weak_lr=rc.base_lr, full_lr=rc.full_lr,
        eval_scenes=rc.eval_scenes, eval_seed=rc.eval_seed,
        data_seed_offset=rc.data_seed_offset,
        scene_config=rc.scene_config(), encoder_config=rc.encoder_config(),
    )

    def progress(mechanism, seed, miou):
        print(f"  {mechanism} seed {seed}: mIoU {miou:.4f}", file=sys.stderr)

    results = run_comparison(xc, progress=progress)
    print(f"{'Method':10s} {'mIoU':>8s}")
    for mechanism in ("gmp", "gap", "spa", "mpa"):
        if mechanism in results["mean"]:
            label = "mpa (ours)" if mechanism == "mpa" else mechanism
            print(f"{label:10s} {results['mean'][mechanism]:8.4f}")
    if args.out:
        payload = {
            "mean": results["mean"],
            "per_seed": {m: {str(s): v for s, v in d.items()}
                         for m, d in results["per_seed"].items()},
            "seeds": list(seeds),
        }
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "compare.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
        write_manifest(args.out, "compare", rc)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weakseg",
        description="Weakly-supervised referring-expression segmentation toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")

    p = sub.add_parser("gen-data", help="emit a synthetic dataset directory")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a fresh split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("segment", help="segment one image with given expressions")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="P6 portable pixmap")
    p.add_argument("--expr", action="append", default=[],
                   help="expression words, e.g. 'red square' (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--points", type=int, default=20)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("compare", help="train all four mechanisms and print the table")
    common(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_compare)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
