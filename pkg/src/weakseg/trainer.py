"""Training loops, optimizers, poly schedule, and checkpoint serialization.

Weak supervision: per iteration a batch of scenes is turned into pooled
expressions and presence labels, every image is scored against the pool,
and the summed classification loss is backpropagated into both towers
(plain SGD, poly-decayed learning rate).  The loop runs inside the mask
firewall, so it can never observe ground-truth pixels.

Full supervision: each image is paired with its own expressions only; the
similarity columns are bilinearly upsampled to pixels inside the autodiff
graph and a Dice loss against the ground-truth masks is minimized with
AdamW.

Checkpoints are a single binary file: magic ``TSEGCKPT``, little-endian
u32 version and tensor count, then per tensor ``u16`` name length, UTF-8
name, ``u8`` rank, ``u32`` dims, float32 payload.  The iteration counter
and the config echo are stored as ``meta/``- and ``config/``-prefixed
tensors inside the same format.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, matmul, reshape, sigmoid, transpose
from .decode import bilinear_weights
from .encoders import EncoderConfig, GroundingModel
from .objectives import dice_loss, soft_margin_loss
from .pooling import MECHANISMS, PoolingConfig, image_text_scores
from .synthbench import (
    SynthScene,
    Vocabulary,
    build_batch,
    mask_firewall,
    tfidf_labels,
)

MODES = ("weak", "full")
LABEL_MODES = ("identity", "tfidf")

CHECKPOINT_MAGIC = b"TSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
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

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.labels not in LABEL_MODES:
            raise ValueError(f"unknown label mode {self.labels!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.total_iters < 1:
            raise ValueError("total_iters must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    def pooling(self) -> PoolingConfig:
        return PoolingConfig(mechanism=self.mechanism, epsilon=self.epsilon,
                             lam=self.lam, p=self.p)


# -- schedule and optimizers ---------------------------------------------------


def poly_lr(base_lr: float, n: int, total: int, power: float = 0.9) -> float:
    """Polynomial decay ``base_lr * (1 - n/total)**power``."""
    if total == 0:
        raise ValueError("total iteration count must be non-zero")
    if not 0 <= n <= total:
        raise ValueError(f"iteration {n} outside [0, {total}]")
    return base_lr * (1.0 - n / total) ** power


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
             lr: float, weight_decay: float = 0.0) -> dict[str, Tensor]:
    """In-place ``theta <- theta - lr * (g + wd * theta)``."""
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        tensor.data -= lr * (g + weight_decay * tensor.data)
    return params


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> dict[str, Tensor]:
    """Bias-corrected Adam moments with decoupled weight decay, in place."""
    step = state.get("step", 0) + 1
    state["step"] = step
    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state.setdefault(name + "/m", np.zeros_like(tensor.data))
        v = state.setdefault(name + "/v", np.zeros_like(tensor.data))
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** step)
        v_hat = v / (1.0 - beta2 ** step)
        tensor.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * tensor.data)
    return params


# -- checkpoint serialization --------------------------------------------------


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]  # float32 parameter snapshots
    iteration: int
    config: TrainConfig
    encoder: EncoderConfig = field(default_factory=EncoderConfig)


def _config_entries(cfg: TrainConfig, enc: EncoderConfig,
                    iteration: int) -> dict[str, np.ndarray]:
    seed_bytes = list(int(cfg.seed).to_bytes(8, "little", signed=False))
    entries = {
        "meta/iteration": np.float32(iteration),
        "config/mode": np.float32(MODES.index(cfg.mode)),
        "config/mechanism": np.float32(MECHANISMS.index(cfg.mechanism)),
        "config/labels": np.float32(LABEL_MODES.index(cfg.labels)),
        "config/base_lr": np.float32(cfg.base_lr),
        "config/total_iters": np.float32(cfg.total_iters),
        "config/batch_size": np.float32(cfg.batch_size),
        "config/lam": np.float32(cfg.lam),
        "config/p": np.float32(cfg.p),
        "config/epsilon": np.float32(cfg.epsilon),
        "config/weight_decay": np.float32(cfg.weight_decay),
        "config/seed_bytes": np.asarray(seed_bytes, dtype=np.float32),
        "config/enc_image_size": np.float32(enc.image_size),
        "config/enc_patch_size": np.float32(enc.patch_size),
        "config/enc_channels": np.float32(enc.channels),
        "config/enc_dim_image": np.float32(enc.dim_image),
        "config/enc_dim_text": np.float32(enc.dim_text),
        "config/enc_dim_embed": np.float32(enc.dim_embed),
        "config/enc_depth": np.float32(enc.depth),
        "config/enc_heads": np.float32(enc.heads),
        "config/enc_mlp_ratio": np.float32(enc.mlp_ratio),
        "config/enc_max_text_len": np.float32(enc.max_text_len),
        "config/enc_init_temperature": np.float32(enc.init_temperature),
    }
    return {k: np.asarray(v, dtype=np.float32) for k, v in entries.items()}


def _config_from_entries(entries: dict[str, np.ndarray]
                         ) -> tuple[TrainConfig, EncoderConfig, int]:
    def scalar(name):
        return float(entries[name])

    seed = int.from_bytes(
        bytes(int(b) for b in entries["config/seed_bytes"]), "little", signed=False
    )
    cfg = TrainConfig(
        mode=MODES[int(scalar("config/mode"))],
        mechanism=MECHANISMS[int(scalar("config/mechanism"))],
        labels=LABEL_MODES[int(scalar("config/labels"))],
        base_lr=scalar("config/base_lr"),
        total_iters=int(scalar("config/total_iters")),
        batch_size=int(scalar("config/batch_size")),
        lam=scalar("config/lam"),
        p=scalar("config/p"),
        epsilon=scalar("config/epsilon"),
        weight_decay=scalar("config/weight_decay"),
        seed=seed,
    )
    enc = EncoderConfig(
        image_size=int(scalar("config/enc_image_size")),
        patch_size=int(scalar("config/enc_patch_size")),
        channels=int(scalar("config/enc_channels")),
        dim_image=int(scalar("config/enc_dim_image")),
        dim_text=int(scalar("config/enc_dim_text")),
        dim_embed=int(scalar("config/enc_dim_embed")),
        depth=int(scalar("config/enc_depth")),
        heads=int(scalar("config/enc_heads")),
        mlp_ratio=scalar("config/enc_mlp_ratio"),
        max_text_len=int(scalar("config/enc_max_text_len")),
        init_temperature=scalar("config/enc_init_temperature"),
    )
    return cfg, enc, int(scalar("meta/iteration"))


def config_hash(cfg: TrainConfig, enc: EncoderConfig | None = None) -> str:
    """Hash of the float32-canonical config echo (matches the checkpoint)."""
    digest = hashlib.sha256()
    for name, arr in sorted(_config_entries(cfg, enc or EncoderConfig(), 0).items()):
        if name.startswith("meta/"):
            continue
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return digest.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = dict(_config_entries(ckpt.config, ckpt.encoder, ckpt.iteration))
    for name, arr in ckpt.tensors.items():
        entries[name] = np.asarray(arr, dtype=np.float32)
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<I", len(entries))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f4")
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded))
        buf += encoded
        buf += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 12)
    offset = 16
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rank = blob[offset]
        offset += 1
        dims = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        size = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(dims)
        offset += 4 * size
        entries[name] = arr.copy()
    meta = {k: v for k, v in entries.items() if k.startswith(("meta/", "config/"))}
    tensors = {k: v for k, v in entries.items() if k not in meta}
    cfg, enc, iteration = _config_from_entries(meta)
    return Checkpoint(tensors=tensors, iteration=iteration, config=cfg, encoder=enc)


# -- training loops ------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    model: GroundingModel
    losses: list[float] = field(default_factory=list)


def _snapshot(model: GroundingModel, cfg: TrainConfig, iteration: int) -> Checkpoint:
    tensors = {name: t.data.astype(np.float32)
               for name, t in model.named_parameters().items()}
    return Checkpoint(tensors=tensors, iteration=iteration, config=cfg,
                      encoder=model.config)


def _prepare(cfg: TrainConfig, model, encoder_cfg, vocab):
    vocab = vocab or Vocabulary()
    encoder_cfg = encoder_cfg or EncoderConfig()
    if model is None:
        model = GroundingModel.create(encoder_cfg, len(vocab), vocab.bos_id,
                                      vocab.eos_id, seed=cfg.seed)
    return model, vocab


def train_weak(cfg: TrainConfig, stream, model: GroundingModel | None = None,
               encoder_cfg: EncoderConfig | None = None,
               vocab: Vocabulary | None = None) -> TrainResult:
    """Weakly-supervised loop: image-level expression labels only."""
    if cfg.mode != "weak":
        raise ValueError("train_weak requires mode='weak'")
    model, vocab = _prepare(cfg, model, encoder_cfg, vocab)
    params = model.named_parameters()
    pool_cfg = cfg.pooling()
    sampler = np.random.default_rng((cfg.seed, 0x5A3))
    losses: list[float] = []
    with mask_firewall():
        for iteration, scenes in zip(range(cfg.total_iters), stream):
            batch = build_batch(scenes, int(sampler.integers(2**63 - 1)))
            labels = tfidf_labels(batch) if cfg.labels == "tfidf" else batch.labels
            expr_tokens = model.encode_expressions(
                [vocab.encode(e) for e in batch.expressions])
            patch_tokens = model.encode_images(
                np.stack([scene.image for scene in scenes]))
            sims = model.similarity(patch_tokens, expr_tokens)  # (B, N, L)
            scores, _ = image_text_scores(sims, pool_cfg)
            # summed over expressions per image, averaged over the batch
            loss = soft_margin_loss(scores.z, labels) / float(len(scenes))
            value = loss.item()
            if not np.isfinite(value):
                raise RuntimeError(f"training diverged at iteration {iteration}")
            losses.append(value)
            for t in params.values():
                t.zero_grad()
            loss.backward()
            lr = poly_lr(cfg.base_lr, iteration, cfg.total_iters)
            sgd_step(params, {n: t.grad for n, t in params.items()}, lr,
                     cfg.weight_decay)
    return TrainResult(checkpoint=_snapshot(model, cfg, cfg.total_iters),
                       model=model, losses=losses)


def train_full(cfg: TrainConfig, stream, model: GroundingModel | None = None,
               encoder_cfg: EncoderConfig | None = None,
               vocab: Vocabulary | None = None) -> TrainResult:
    """Fully-supervised loop: per-pixel Dice against ground-truth masks."""
    if cfg.mode != "full":
        raise ValueError("train_full requires mode='full'")
    model, vocab = _prepare(cfg, model, encoder_cfg, vocab)
    params = model.named_parameters()
    state: dict = {}
    losses: list[float] = []
    patch = model.config.patch_size
    up_rows = up_cols = None
    for iteration, scenes in zip(range(cfg.total_iters), stream):
        patch_tokens = model.encode_images(
            np.stack([scene.image for scene in scenes]))
        total = None
        for b, scene in enumerate(scenes):
            grid_shape = (scene.height // patch, scene.width // patch)
            if up_rows is None:
                up_rows = Tensor(bilinear_weights(grid_shape[0], scene.height))
                up_cols = Tensor(bilinear_weights(grid_shape[1], scene.width).T)
            expr_tokens = model.encode_expressions(
                [vocab.encode(e) for e in scene.expressions])
            sims = model.similarity(patch_tokens[b], expr_tokens)
            # (N, L) -> (L, gh, gw) -> bilinear to (L, H, W) in two matmuls
            grids = transpose(reshape(sims, grid_shape + (len(scene.expressions),)),
                              (2, 0, 1))
            pixels = matmul(matmul(up_rows, grids), up_cols)
            pred = sigmoid(pixels)
            gt = np.stack(scene.gt_masks).astype(np.float64)
            image_loss = dice_loss(pred, gt)
            total = image_loss if total is None else total + image_loss
        loss = total / float(len(scenes))
        value = loss.item()
        if not np.isfinite(value):
            raise RuntimeError(f"training diverged at iteration {iteration}")
        losses.append(value)
        for t in params.values():
            t.zero_grad()
        loss.backward()
        lr = poly_lr(cfg.base_lr, iteration, cfg.total_iters)
        adamw_step(params, {n: t.grad for n, t in params.items()}, state, lr,
                   weight_decay=cfg.weight_decay)
    return TrainResult(checkpoint=_snapshot(model, cfg, cfg.total_iters),
                       model=model, losses=losses)


def train(cfg: TrainConfig, stream, **kwargs) -> TrainResult:
    return (train_weak if cfg.mode == "weak" else train_full)(cfg, stream, **kwargs)


def model_from_checkpoint(ckpt: Checkpoint,
                          vocab: Vocabulary | None = None) -> GroundingModel:
    """Rebuild the model architecture from the config echo and load weights."""
    vocab = vocab or Vocabulary()
    model = GroundingModel.create(ckpt.encoder, len(vocab), vocab.bos_id,
                                  vocab.eos_id, seed=0)
    model.load_state(ckpt.tensors)
    return model
