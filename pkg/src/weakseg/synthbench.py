"""Procedural benchmark: colored shapes with compositional referring expressions.

Scenes hold 2-5 non-overlapping objects drawn from a small attribute
grammar (8 colors x 3 shapes x 2 sizes).  Every object contributes the
expressions "<color> <shape>" and "<size> <color> <shape>"; each color and
size present also contributes a shared-attribute phrase ("<color> thing",
"<size> thing"), so expression masks overlap by construction.  Masks are
rasterized with exact pixel-center inside tests (no anti-aliasing), so a
perfect predictor reaches IoU 1.0.

Weak supervision contract: training code runs inside :func:`mask_firewall`,
under which any read of ``SynthScene.gt_masks`` raises.
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import netpbm

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.72, 0.18),
    "blue": (0.15, 0.25, 0.88),
    "yellow": (0.92, 0.86, 0.12),
    "purple": (0.55, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.80, 0.85),
    "brown": (0.55, 0.35, 0.15),
}
SHAPES = ("square", "circle", "triangle")
SIZES = ("small", "large")
BACKGROUND = (0.12, 0.12, 0.12)

DEFAULT_HOLDOUT = (("blue", "triangle"), ("red", "circle"))


class Vocabulary:
    """Fixed word list with BOS/EOS; expressions are encoded word by word."""

    def __init__(self, words=None):
        content = tuple(words) if words is not None else (
            tuple(COLORS) + SHAPES + SIZES + ("thing",)
        )
        self.words = ("[bos]", "[eos]") + content
        self.bos_id = 0
        self.eos_id = 1
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, expression) -> list[int]:
        try:
            return [self._ids[w] for w in expression]
        except KeyError as exc:
            raise ValueError(f"word not in vocabulary: {exc.args[0]!r}") from None

    def decode(self, ids) -> tuple[str, ...]:
        return tuple(self.words[i] for i in ids)


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    patch_size: int = 8
    min_objects: int = 2
    max_objects: int = 5
    colors: tuple[str, ...] = tuple(COLORS)
    shapes: tuple[str, ...] = SHAPES
    small_radius: tuple[float, float] = (5.0, 7.0)
    large_radius: tuple[float, float] = (10.0, 13.0)
    forbidden_pairs: tuple[tuple[str, str], ...] = ()
    required_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError("scene size must be divisible by the patch size")
        if not self.colors or not self.shapes:
            raise ValueError("palette must contain at least one color and one shape")
        unknown = set(self.colors) - set(COLORS)
        if unknown:
            raise ValueError(f"unknown colors: {sorted(unknown)}")
        if not self.allowed_pairs():
            raise ValueError("every (color, shape) combination is forbidden")

    def allowed_pairs(self) -> list[tuple[str, str]]:
        forbidden = set(self.forbidden_pairs)
        return [(c, s) for c in self.colors for s in self.shapes if (c, s) not in forbidden]


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    center: tuple[float, float]  # (row, col) in pixel coordinates
    radius: float


_firewall_depth = 0


@contextmanager
def mask_firewall():
    """While active, any read of ``SynthScene.gt_masks`` raises.

    Wraps weakly-supervised training so the loop can only observe
    (image, expression, label) triples.
    """
    global _firewall_depth
    _firewall_depth += 1
    try:
        yield
    finally:
        _firewall_depth -= 1


@dataclass
class SynthScene:
    image: np.ndarray
    objects: list[SceneObject]
    expressions: tuple[tuple[str, ...], ...]
    masks: list[np.ndarray] = field(repr=False)

    @property
    def gt_masks(self) -> list[np.ndarray]:
        if _firewall_depth:
            raise RuntimeError(
                "ground-truth masks are off-limits on the weakly-supervised training path"
            )
        return self.masks

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


# -- rasterization -----------------------------------------------------------


def rasterize(obj: SceneObject, height: int, width: int) -> np.ndarray:
    """Exact inside-test of pixel centers against the object's geometry."""
    yy, xx = np.meshgrid(
        np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij"
    )
    cy, cx = obj.center
    r = obj.radius
    if obj.shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    if obj.shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if obj.shape == "triangle":
        # apex-up isoceles triangle inscribed around the center
        a = (cy - r, cx)
        b = (cy + r, cx - r)
        c = (cy + r, cx + r)

        def cross(p, q):
            return (q[1] - p[1]) * (yy - p[0]) - (q[0] - p[0]) * (xx - p[1])

        d1, d2, d3 = cross(a, b), cross(b, c), cross(c, a)
        neg = (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
        pos = (d1 >= 0) & (d2 >= 0) & (d3 >= 0)
        return neg | pos
    raise ValueError(f"unknown shape {obj.shape!r}")


def expression_matches(expression: tuple[str, ...], obj: SceneObject) -> bool:
    attrs = {obj.color, obj.shape, obj.size}
    return all(word == "thing" or word in attrs for word in expression)


def scene_expressions(objects: list[SceneObject]) -> tuple[tuple[str, ...], ...]:
    exprs: list[tuple[str, ...]] = []
    for o in objects:
        exprs.append((o.color, o.shape))
        exprs.append((o.size, o.color, o.shape))
    for color in dict.fromkeys(o.color for o in objects):
        exprs.append((color, "thing"))
    for size in dict.fromkeys(o.size for o in objects):
        exprs.append((size, "thing"))
    return tuple(dict.fromkeys(exprs))


def generate_scene(seed: int, config: SceneConfig | None = None) -> SynthScene:
    """Deterministic scene synthesis from a 64-bit seed."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    allowed = cfg.allowed_pairs()

    for _ in range(10):  # full restarts if placement gets stuck
        target = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        objects: list[SceneObject] = []
        for k in range(target):
            for _attempt in range(200):
                if k == 0 and cfg.required_pairs:
                    color, shape = cfg.required_pairs[int(rng.integers(len(cfg.required_pairs)))]
                else:
                    color, shape = allowed[int(rng.integers(len(allowed)))]
                size = SIZES[int(rng.integers(2))]
                lo, hi = cfg.small_radius if size == "small" else cfg.large_radius
                radius = float(rng.uniform(lo, hi))
                margin = radius + 1.5
                cy = float(rng.uniform(margin, cfg.height - margin))
                cx = float(rng.uniform(margin, cfg.width - margin))
                clear = all(
                    np.hypot(cy - o.center[0], cx - o.center[1]) >= radius + o.radius + 2.0
                    for o in objects
                )
                if clear:
                    objects.append(SceneObject(shape, color, size, (cy, cx), radius))
                    break
            else:
                break  # could not place object k; stop growing this scene
        if len(objects) >= cfg.min_objects:
            break
    else:
        raise RuntimeError("could not place the minimum number of objects")

    rasters = [rasterize(o, cfg.height, cfg.width) for o in objects]
    image = np.empty((cfg.height, cfg.width, 3))
    image[:] = BACKGROUND
    for o, m in zip(objects, rasters):
        image[m] = COLORS[o.color]
    expressions = scene_expressions(objects)
    masks = [
        np.logical_or.reduce([m for o, m in zip(objects, rasters) if expression_matches(e, o)])
        for e in expressions
    ]
    return SynthScene(image=image, objects=objects, expressions=expressions, masks=masks)


# -- batches and labels ------------------------------------------------------


@dataclass
class BatchSpec:
    scenes: list[SynthScene]
    positives: list[list[tuple[str, ...]]]
    expressions: list[tuple[str, ...]]
    labels: np.ndarray  # B x L, identity matching

    @property
    def size(self) -> int:
        return len(self.scenes)


def build_batch(scenes: list[SynthScene], sampler_seed: int,
                positives_per_image_mean: float = 3.0) -> BatchSpec:
    """Sample positive expressions per image and pool them across the batch.

    The pooled list is deduplicated by exact token-sequence equality; the
    label matrix marks pooled expressions that were sampled for each image.
    """
    if len(scenes) < 2:
        raise ValueError("need at least two scenes so negatives exist")
    rng = np.random.default_rng(sampler_seed)
    positives: list[list[tuple[str, ...]]] = []
    for scene in scenes:
        available = scene.expressions
        if not available:
            raise ValueError("scene offers no expressions")
        count = int(rng.poisson(positives_per_image_mean))
        count = min(max(count, 1), len(available))
        picks = rng.choice(len(available), size=count, replace=False)
        positives.append([available[i] for i in picks])
    pooled = list(dict.fromkeys(expr for image_pos in positives for expr in image_pos))
    labels = np.zeros((len(scenes), len(pooled)))
    for b, image_pos in enumerate(positives):
        present = set(image_pos)
        for j, expr in enumerate(pooled):
            if expr in present:
                labels[b, j] = 1.0
    return BatchSpec(scenes=scenes, positives=positives, expressions=pooled, labels=labels)


def _tfidf_vectors(expressions) -> dict[tuple[str, ...], np.ndarray]:
    words = sorted({w for e in expressions for w in e})
    index = {w: i for i, w in enumerate(words)}
    n = len(expressions)
    df = np.zeros(len(words))
    for e in expressions:
        for w in set(e):
            df[index[w]] += 1
    # smooth idf, matching the common "ln((1+n)/(1+df)) + 1" convention
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    vectors = {}
    for e in expressions:
        v = np.zeros(len(words))
        for w in e:
            v[index[w]] += 1.0
        v *= idf
        v /= np.linalg.norm(v)
        vectors[e] = v
    return vectors


def tfidf_labels(batch: BatchSpec) -> np.ndarray:
    """Soft labels: cosine of tf-idf word vectors against each image's positives."""
    vectors = _tfidf_vectors(batch.expressions)
    labels = np.zeros_like(batch.labels)
    for b, image_pos in enumerate(batch.positives):
        pos_vecs = np.stack([vectors[e] for e in image_pos])
        for j, expr in enumerate(batch.expressions):
            labels[b, j] = float((pos_vecs @ vectors[expr]).max())
    return np.clip(labels, 0.0, 1.0)


def hflip_augment(scene: SynthScene, coin: bool) -> SynthScene:
    """Mirror image and masks left-right; expressions carry no lateral words."""
    if not coin:
        return scene
    width = scene.width
    objects = [
        replace(o, center=(o.center[0], width - o.center[1])) for o in scene.objects
    ]
    return SynthScene(
        image=scene.image[:, ::-1].copy(),
        objects=objects,
        expressions=scene.expressions,
        masks=[m[:, ::-1].copy() for m in scene.masks],
    )


def holdout_split(config: SceneConfig,
                  pairs: tuple[tuple[str, str], ...] = DEFAULT_HOLDOUT,
                  ) -> tuple[SceneConfig, SceneConfig]:
    """Split the attribute grammar for zero-shot composition transfer.

    The returned train config never co-locates a held-out (color, shape)
    pair in one object; the eval config forces at least one held-out
    composition into every scene.
    """
    if len(config.colors) < 2 or len(config.shapes) < 2:
        raise ValueError("grammar needs at least two colors and two shapes to split")
    for color, shape in pairs:
        if color not in config.colors or shape not in config.shapes:
            raise ValueError(f"held-out pair ({color}, {shape}) is outside the grammar")
    train = replace(config, forbidden_pairs=tuple(pairs), required_pairs=())
    remaining = train.allowed_pairs()
    colors_left = {c for c, _ in remaining}
    shapes_left = {s for _, s in remaining}
    if colors_left != set(config.colors) or shapes_left != set(config.shapes):
        raise ValueError("split would leave a color or shape entirely unseen in training")
    eval_cfg = replace(config, forbidden_pairs=(), required_pairs=tuple(pairs))
    return train, eval_cfg


def scene_stream(config: SceneConfig, seed: int, batch_size: int, flip: bool = True):
    """Endless deterministic stream of scene batches (with optional mirroring)."""
    rng = np.random.default_rng(seed)
    while True:
        scenes = []
        for _ in range(batch_size):
            scene = generate_scene(int(rng.integers(2**63 - 1)), config)
            if flip:
                scene = hflip_augment(scene, bool(rng.integers(2)))
            scenes.append(scene)
        yield scenes


def make_scenes(config: SceneConfig, seed: int, count: int) -> list[SynthScene]:
    """A fixed list of scenes (e.g. an evaluation split), no augmentation."""
    rng = np.random.default_rng(seed)
    return [generate_scene(int(rng.integers(2**63 - 1)), config) for _ in range(count)]


def expression_kind(expression: tuple[str, ...]) -> str:
    """Coarse phrase category used in evaluation breakdowns."""
    if expression[-1] == "thing":
        return "color_thing" if expression[0] in COLORS else "size_thing"
    return "size_color_shape" if len(expression) == 3 else "color_shape"


def dump_dataset(directory, scenes: list[SynthScene], vocab: Vocabulary) -> None:
    """Write scenes as P6 images + P5 masks with a JSON manifest."""
    os.makedirs(directory, exist_ok=True)
    manifest = {"version": 1, "vocabulary": list(vocab.words), "scenes": []}
    for i, scene in enumerate(scenes):
        image_name = f"scene_{i:05d}.ppm"
        netpbm.write_ppm(os.path.join(directory, image_name), scene.image)
        mask_names = []
        for j, mask in enumerate(scene.gt_masks):
            name = f"scene_{i:05d}_mask_{j:02d}.pgm"
            netpbm.write_pgm(os.path.join(directory, name), mask)
            mask_names.append(name)
        manifest["scenes"].append({
            "image": image_name,
            "size": [scene.height, scene.width],
            "expressions": [vocab.encode(e) for e in scene.expressions],
            "expression_words": [list(e) for e in scene.expressions],
            "masks": mask_names,
            "objects": [
                {"shape": o.shape, "color": o.color, "size": o.size,
                 "center": list(o.center), "radius": o.radius}
                for o in scene.objects
            ],
        })
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
