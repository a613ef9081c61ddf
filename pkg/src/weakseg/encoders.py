"""Toy dual encoders and the temperature-scaled patch-text similarity matrix.

An image is split into non-overlapping patches, linearly projected, given
learned position embeddings and contextualized by pre-norm transformer
blocks.  Each referring expression is tokenized to ids, embedded with
position information, run through the same block implementation, and
summarized by its leading (BOS) token.  Both sides are then projected to a
shared space, L2-normalized, and compared by scaled cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    concatenate,
    embedding,
    exp,
    gelu,
    layer_norm,
    matmul,
    multi_head_attention,
    sum_reduce,
)

NORM_FLOOR = 1e-12


@dataclass
class EncoderConfig:
    """Desk-scale defaults: 64x64 images, 8x8 patches, width-64 towers."""

    image_size: int = 64
    patch_size: int = 8
    channels: int = 3
    dim_image: int = 64
    dim_text: int = 64
    dim_embed: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    max_text_len: int = 8
    init_temperature: float = 0.07

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class BlockParams:
    """One pre-norm transformer block: attention + GELU MLP."""

    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str):
        for key, value in self.__dict__.items():
            yield f"{prefix}.{key}", value


@dataclass
class ImageEncoderParams:
    patch_size: int
    dim: int
    heads: int
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    blocks: list[BlockParams]

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("embedding dim must be divisible by the head count")

    def named(self, prefix: str = "image"):
        yield f"{prefix}.patch_w", self.patch_w
        yield f"{prefix}.patch_b", self.patch_b
        yield f"{prefix}.pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.block{i}")


@dataclass
class TextEncoderParams:
    heads: int
    bos_id: int
    eos_id: int
    vocab: Tensor
    pos: Tensor
    blocks: list[BlockParams]

    def __post_init__(self):
        rows = self.vocab.data.shape[0]
        ok = 0 <= self.bos_id < rows and 0 <= self.eos_id < rows
        if not ok or self.bos_id == self.eos_id:
            raise ValueError("BOS/EOS ids must be distinct rows of the vocabulary table")

    def named(self, prefix: str = "text"):
        yield f"{prefix}.vocab", self.vocab
        yield f"{prefix}.pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.block{i}")


@dataclass
class ProjectionParams:
    image_proj: Tensor
    text_proj: Tensor
    log_temperature: Tensor

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature.data))

    def named(self, prefix: str = "proj"):
        yield f"{prefix}.image_proj", self.image_proj
        yield f"{prefix}.text_proj", self.text_proj
        yield f"{prefix}.log_temperature", self.log_temperature


def _init_block(rng: np.random.Generator, dim: int, hidden: int) -> BlockParams:
    def w(rows, cols):
        return Tensor(rng.normal(0.0, 0.02, size=(rows, cols)), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    return BlockParams(
        ln1_g=ones(dim), ln1_b=zeros(dim),
        wq=w(dim, dim), bq=zeros(dim),
        wk=w(dim, dim), bk=zeros(dim),
        wv=w(dim, dim), bv=zeros(dim),
        wo=w(dim, dim), bo=zeros(dim),
        ln2_g=ones(dim), ln2_b=zeros(dim),
        w1=w(dim, hidden), b1=zeros(hidden),
        w2=w(hidden, dim), b2=zeros(dim),
    )


def transformer_block(x: Tensor, blk: BlockParams, heads: int) -> Tensor:
    """Pre-norm block: x + attention(LN(x)), then x + MLP(LN(x)).

    Shape-generic: works on (N, D) or on batched (..., N, D) inputs.
    """
    h = layer_norm(x, blk.ln1_g, blk.ln1_b)
    q = h @ blk.wq + blk.bq
    k = h @ blk.wk + blk.bk
    v = h @ blk.wv + blk.bv
    x = x + (multi_head_attention(q, k, v, heads) @ blk.wo + blk.bo)
    h2 = layer_norm(x, blk.ln2_g, blk.ln2_b)
    return x + (gelu(h2 @ blk.w1 + blk.b1) @ blk.w2 + blk.b2)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten non-overlapping patches in row-major patch order.

    Accepts one image (H, W, C) or a batch (B, H, W, C).
    """
    p = patch_size
    h, w, c = image.shape[-3], image.shape[-2], image.shape[-1]
    if h % p or w % p:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {p}")
    lead = image.shape[:-3]
    grid = image.reshape(*lead, h // p, p, w // p, p, c)
    grid = np.moveaxis(grid, -3, -4)  # (..., h/p, w/p, p, p, c)
    return grid.reshape(*lead, (h // p) * (w // p), p * p * c)


def _run_image_tower(raw: np.ndarray, params: ImageEncoderParams) -> Tensor:
    if raw.shape[-2] != params.pos.data.shape[0]:
        raise ValueError(
            f"{raw.shape[-2]} patches but {params.pos.data.shape[0]} position embeddings"
        )
    x = Tensor(raw) @ params.patch_w + params.patch_b + params.pos
    for blk in params.blocks:
        x = transformer_block(x, blk, params.heads)
    return x


def encode_image(image: np.ndarray, params: ImageEncoderParams) -> Tensor:
    """Contextualized patch tokens, one row per patch in row-major order."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError("encode_image expects one H x W x C image")
    return _run_image_tower(patchify(image, params.patch_size), params)


def encode_images(images: np.ndarray, params: ImageEncoderParams) -> Tensor:
    """Batched variant: (B, H, W, C) images to (B, N, D) patch tokens."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError("encode_images expects a B x H x W x C batch")
    return _run_image_tower(patchify(images, params.patch_size), params)


def _text_sequence(token_ids, params: TextEncoderParams) -> list[int]:
    ids = list(token_ids)
    if not ids:
        raise ValueError("empty token sequence")
    seq = [params.bos_id] + ids + [params.eos_id]
    if len(seq) > params.pos.data.shape[0]:
        raise ValueError(f"sequence of {len(seq)} tokens exceeds the position table")
    return seq


def encode_text(token_ids, params: TextEncoderParams) -> Tensor:
    """Single expression embedding: the contextualized BOS-position output."""
    seq = _text_sequence(token_ids, params)
    x = embedding(params.vocab, seq) + params.pos[: len(seq)]
    for blk in params.blocks:
        x = transformer_block(x, blk, params.heads)
    return x[0]


def encode_texts(id_sequences, params: TextEncoderParams) -> Tensor:
    """Batch-encode expressions into (L, D) rows, preserving input order.

    Sequences are grouped by length so each group runs as one batched
    tower pass; a constant permutation matrix restores the caller's order.
    """
    seqs = [_text_sequence(ids, params) for ids in id_sequences]
    if not seqs:
        raise ValueError("no expressions to encode")
    groups: dict[int, list[int]] = {}
    for position, seq in enumerate(seqs):
        groups.setdefault(len(seq), []).append(position)
    pieces = []
    grouped_order: list[int] = []
    for length in sorted(groups):
        positions = groups[length]
        ids = np.asarray([seqs[p] for p in positions], dtype=np.int64)
        x = embedding(params.vocab, ids) + params.pos[:length]
        for blk in params.blocks:
            x = transformer_block(x, blk, params.heads)
        pieces.append(x[:, 0, :])
        grouped_order.extend(positions)
    stacked = concatenate(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    if grouped_order == list(range(len(seqs))):
        return stacked
    # row i of the result must be the grouped row j with grouped_order[j] == i
    perm = np.zeros((len(seqs), len(seqs)))
    perm[grouped_order, np.arange(len(seqs))] = 1.0
    return Tensor(perm) @ stacked


def similarity_matrix(x: Tensor, y: Tensor, proj: ProjectionParams) -> Tensor:
    """Temperature-scaled cosine similarities between patches and expressions.

    Both sides are projected to the shared dimension and row-normalized;
    entry (i, j) is the cosine of patch i and expression j divided by
    ``exp(log_temperature)``.  ``x`` may carry leading batch axes.
    """
    if x.data.ndim < 2 or y.data.ndim != 2 or x.data.shape[-2] < 1 or y.data.shape[0] < 1:
        raise ValueError("need at least one patch token and one expression token")
    xp = matmul(x, proj.image_proj)
    yp = matmul(y, proj.text_proj)
    xn = sum_reduce(xp * xp, axis=-1, keepdims=True) ** 0.5
    yn = sum_reduce(yp * yp, axis=-1, keepdims=True) ** 0.5
    if np.any(xn.data < NORM_FLOOR) or np.any(yn.data < NORM_FLOOR):
        raise ValueError("zero vector after projection")
    cos = (xp / xn) @ (yp / yn).T
    return cos / exp(proj.log_temperature)


@dataclass
class GroundingModel:
    """Bundles both encoder towers and the shared projection."""

    config: EncoderConfig
    image: ImageEncoderParams
    text: TextEncoderParams
    proj: ProjectionParams

    @classmethod
    def create(cls, config: EncoderConfig, vocab_size: int, bos_id: int, eos_id: int,
               seed: int) -> "GroundingModel":
        rng = np.random.default_rng(seed)
        c = config

        def w(rows, cols):
            return Tensor(rng.normal(0.0, 0.02, size=(rows, cols)), requires_grad=True)

        image = ImageEncoderParams(
            patch_size=c.patch_size,
            dim=c.dim_image,
            heads=c.heads,
            patch_w=w(c.patch_size * c.patch_size * c.channels, c.dim_image),
            patch_b=Tensor(np.zeros(c.dim_image), requires_grad=True),
            pos=w(c.num_patches, c.dim_image),
            blocks=[_init_block(rng, c.dim_image, int(c.dim_image * c.mlp_ratio))
                    for _ in range(c.depth)],
        )
        text = TextEncoderParams(
            heads=c.heads,
            bos_id=bos_id,
            eos_id=eos_id,
            vocab=w(vocab_size, c.dim_text),
            pos=w(c.max_text_len, c.dim_text),
            blocks=[_init_block(rng, c.dim_text, int(c.dim_text * c.mlp_ratio))
                    for _ in range(c.depth)],
        )
        proj = ProjectionParams(
            image_proj=w(c.dim_image, c.dim_embed),
            text_proj=w(c.dim_text, c.dim_embed),
            log_temperature=Tensor(np.log(c.init_temperature), requires_grad=True),
        )
        return cls(config=c, image=image, text=text, proj=proj)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, t in self.image.named():
            out[name] = t
        for name, t in self.text.named():
            out[name] = t
        for name, t in self.proj.named():
            out[name] = t
        return out

    def encode_image(self, image: np.ndarray) -> Tensor:
        return encode_image(image, self.image)

    def encode_images(self, images: np.ndarray) -> Tensor:
        return encode_images(images, self.image)

    def encode_expressions(self, id_sequences) -> Tensor:
        """Stack per-expression embeddings into an L x D_T matrix."""
        return encode_texts(id_sequences, self.text)

    def similarity(self, patch_tokens: Tensor, expr_tokens: Tensor) -> Tensor:
        return similarity_matrix(patch_tokens, expr_tokens, self.proj)

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values (e.g. from a checkpoint)."""
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ValueError(f"missing parameters in state: {sorted(missing)[:3]}...")
        for name, tensor in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.data.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {tensor.data.shape}")
            tensor.data = np.ascontiguousarray(value)
