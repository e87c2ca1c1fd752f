"""
Seeded synthetic worlds with known ground truth.

Every sample picks a layout cluster (which fixes the mean object box) and
draws its object box around that mean with ``box_jitter`` noise; parts are
placed inside the object per ``part_spec``. Two flavours:

* vector mode writes ``full`` and ``object`` stage features of the form
  ``[cluster one-hot | object box | part boxes] + N(0, feature_noise)``.
  For the ``full`` stage boxes are normalized by the image, for the
  ``object`` stage by the object box. The class label is the cluster.
* raster mode renders grayscale images: a bright object rectangle carrying
  a class-specific stripe texture, darker part rectangles, optional stripe
  clutter in the background, and pixel noise of std ``feature_noise``.
  Features come from ``grid_descriptor`` on demand.

Randomness flows from one ``SeedSequence`` so equal seeds give equal worlds.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .features import FULL, OBJECT, CompositeProvider, PrecomputedProvider, RasterImage, RasterProvider, write_fvec, write_pgm
from .geometry import BoundingBox, ImageSize
from .index import AnnotatedImage, FeatureRef, write_manifest


@dataclass(frozen=True)
class PartSpec:
    """Mean part box in the object's unit square, plus placement jitter and raster intensity offset."""

    name: str
    box: tuple[float, float, float, float]
    jitter: float = 0.03
    shade: float = -0.3


DEFAULT_PARTS = (
    PartSpec("head", (0.6, 0.05, 0.32, 0.32), 0.03, -0.45),
    PartSpec("body", (0.08, 0.38, 0.8, 0.56), 0.03, -0.2),
)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_train: int = 500
    n_test: int = 200
    n_clusters: int = 8
    n_classes: int = 4
    raster: bool = True
    image_size: ImageSize = ImageSize(96, 96)
    size_jitter: float = 0.2
    box_jitter: float = 0.05
    feature_noise: float = 0.1
    clutter: int = 2
    stripe_contrast: float = 0.12
    part_spec: tuple[PartSpec, ...] = DEFAULT_PARTS

    def __post_init__(self) -> None:
        if self.n_train < 1 or self.n_test < 0 or self.n_clusters < 1 or self.n_classes < 1:
            raise ConfigError("sample, cluster and class counts must be positive")
        for name in ("box_jitter", "feature_noise", "size_jitter", "stripe_contrast"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {v}")
        if self.size_jitter >= 1:
            raise ConfigError("size_jitter must be below 1")
        names = [p.name for p in self.part_spec]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate part names in {names}")
        for p in self.part_spec:
            x, y, w, h = p.box
            if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > 1 or y + h > 1:
                raise ConfigError(f"part {p.name!r} mean box {p.box} does not fit inside the object")


@dataclass
class SynthWorld:
    config: SynthConfig
    train: list[AnnotatedImage]
    test: list[AnnotatedImage]
    provider: CompositeProvider
    clusters: dict[str, int] = field(default_factory=dict)
    rasters: dict[str, RasterImage] = field(default_factory=dict)
    vectors: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @property
    def part_names(self) -> list[str]:
        return [p.name for p in self.config.part_spec]

    def write(self, out_dir: str | os.PathLike) -> tuple[Path, Path]:
        """Write ``train.jsonl``/``test.jsonl`` plus FVEC files or PGM images; returns the manifest paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for split, records in (("train", self.train), ("test", self.test)):
            written = []
            if self.config.raster:
                img_dir = out / "images"
                img_dir.mkdir(exist_ok=True)
                for rec in records:
                    path = img_dir / f"{rec.id}.pgm"
                    write_pgm(path, self.rasters[rec.id])
                    written.append(replace(rec, image_path=path))
            else:
                stages = ("full", "object")
                for stage in stages:
                    mat = np.vstack([self.vectors[rec.id][stage] for rec in records]) if records else np.zeros((0, 0))
                    write_fvec(out / f"{split}_{stage}.fvec", mat)
                for row, rec in enumerate(records):
                    refs = {FULL: FeatureRef(out / f"{split}_full.fvec", row), OBJECT: FeatureRef(out / f"{split}_object.fvec", row)}
                    written.append(replace(rec, feature_refs=refs))
            path = out / f"{split}.jsonl"
            write_manifest(path, written)
            paths.append(path)
        return paths[0], paths[1]


@dataclass(frozen=True)
class _Cluster:
    cx: float
    cy: float
    w: float
    h: float
    intensity: float


def _draw_clusters(cfg: SynthConfig, rng: np.random.Generator) -> list[_Cluster]:
    clusters = []
    for _ in range(cfg.n_clusters):
        w = rng.uniform(0.35, 0.6)
        h = rng.uniform(0.35, 0.6)
        cx = rng.uniform(w / 2 + 0.05, 1 - w / 2 - 0.05)
        cy = rng.uniform(h / 2 + 0.05, 1 - h / 2 - 0.05)
        clusters.append(_Cluster(cx, cy, w, h, rng.uniform(0.7, 0.9)))
    return clusters


def _clip_unit_box(x: float, y: float, w: float, h: float, lo: float, hi: float) -> tuple[float, float, float, float]:
    w = min(max(w, 0.05), hi - lo)
    h = min(max(h, 0.05), hi - lo)
    x = min(max(x, lo), hi - w)
    y = min(max(y, lo), hi - h)
    return x, y, w, h


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Fraction of each of ``n`` unit pixels covered by the interval [lo, hi)."""
    edges = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, edges + 1.0) - np.maximum(lo, edges), 0.0, 1.0)


def _rect_mask(box: BoundingBox, width: int, height: int) -> np.ndarray:
    return np.outer(_coverage(box.y, box.y2, height), _coverage(box.x, box.x2, width))


def _stripes(width: int, height: int, angle: float, period: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    return np.sin(2.0 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / period + phase)


def _class_angle(label: int, n_classes: int) -> float:
    return math.pi * label / n_classes


def _render(
    cfg: SynthConfig,
    rng: np.random.Generator,
    width: int,
    height: int,
    obj: BoundingBox,
    parts: dict[str, BoundingBox],
    intensity: float,
    label: int,
) -> RasterImage:
    px = np.full((height, width), rng.uniform(0.15, 0.3))
    for _ in range(cfg.clutter):
        cw, ch = rng.uniform(0.15, 0.3) * width, rng.uniform(0.15, 0.3) * height
        clutter_box = BoundingBox(rng.uniform(0, width - cw), rng.uniform(0, height - ch), cw, ch)
        angle = _class_angle(int(rng.integers(cfg.n_classes)), cfg.n_classes)
        texture = cfg.stripe_contrast * _stripes(width, height, angle, 6.0, rng.uniform(0, 2 * np.pi))
        px += _rect_mask(clutter_box, width, height) * texture
    mask = _rect_mask(obj, width, height)
    texture = cfg.stripe_contrast * _stripes(width, height, _class_angle(label, cfg.n_classes), 6.0, rng.uniform(0, 2 * np.pi))
    px = px * (1.0 - mask) + mask * (intensity + texture)
    for spec in cfg.part_spec:
        box = parts.get(spec.name)
        if box is not None:
            px += _rect_mask(box, width, height) * spec.shade
    if cfg.feature_noise > 0:
        px += rng.normal(0.0, cfg.feature_noise, size=px.shape)
    # quantized like the PGM it will be written to, so disk and memory agree
    return RasterImage(np.rint(np.clip(px, 0.0, 1.0) * 255.0) / 255.0)


def _vector_features(
    cfg: SynthConfig,
    rng: np.random.Generator,
    cluster: int,
    size: ImageSize,
    obj: BoundingBox,
    parts: dict[str, BoundingBox],
) -> dict[str, np.ndarray]:
    onehot = np.zeros(cfg.n_clusters)
    onehot[cluster] = 1.0

    def rel(box: BoundingBox, frame: BoundingBox) -> list[float]:
        return [(box.x - frame.x) / frame.w, (box.y - frame.y) / frame.h, box.w / frame.w, box.h / frame.h]

    out = {}
    for stage, frame in (("full", size.full_box()), ("object", obj)):
        vals = list(onehot) + rel(obj, frame)
        for spec in cfg.part_spec:
            vals += rel(parts[spec.name], frame)
        vec = np.asarray(vals)
        if cfg.feature_noise > 0:
            vec = vec + rng.normal(0.0, cfg.feature_noise, size=vec.shape)
        out[stage] = vec
    return out


def _sample(
    cfg: SynthConfig, clusters: Sequence[_Cluster], rng: np.random.Generator, sample_id: str, world: SynthWorld
) -> AnnotatedImage:
    c = int(rng.integers(cfg.n_clusters))
    cl = clusters[c]
    label = int(rng.integers(cfg.n_classes)) if cfg.raster else c
    sw = cfg.image_size.width * math.exp(rng.uniform(-cfg.size_jitter, cfg.size_jitter))
    sh = cfg.image_size.height * math.exp(rng.uniform(-cfg.size_jitter, cfg.size_jitter))
    width, height = max(8, int(round(sw))), max(8, int(round(sh)))
    size = ImageSize(width, height)

    j = cfg.box_jitter
    w = cl.w * math.exp(2.0 * j * rng.normal())
    h = cl.h * math.exp(2.0 * j * rng.normal())
    cx = cl.cx + j * rng.normal()
    cy = cl.cy + j * rng.normal()
    ux, uy, uw, uh = _clip_unit_box(cx - w / 2, cy - h / 2, w, h, 0.02, 0.98)
    obj = BoundingBox(ux * width, uy * height, uw * width, uh * height)

    parts: dict[str, BoundingBox] = {}
    for spec in cfg.part_spec:
        bx, by, bw, bh = spec.box
        pw = bw * math.exp(spec.jitter * rng.normal())
        ph = bh * math.exp(spec.jitter * rng.normal())
        px = bx + spec.jitter * rng.normal()
        py = by + spec.jitter * rng.normal()
        rx, ry, rw, rh = _clip_unit_box(px, py, pw, ph, 0.0, 1.0)
        parts[spec.name] = BoundingBox(obj.x + rx * obj.w, obj.y + ry * obj.h, rw * obj.w, rh * obj.h)

    world.clusters[sample_id] = c
    if cfg.raster:
        world.rasters[sample_id] = _render(cfg, rng, width, height, obj, parts, cl.intensity, label)
    else:
        world.vectors[sample_id] = _vector_features(cfg, rng, c, size, obj, parts)
    return AnnotatedImage(
        id=sample_id,
        size=size,
        class_label=f"c{label:02d}",
        object_box=obj,
        part_boxes=dict(parts),
    )


def generate(cfg: SynthConfig | None = None) -> SynthWorld:
    """Build a world in memory; call ``SynthWorld.write`` to put it on disk."""
    cfg = cfg or SynthConfig()
    layout_seq, train_seq, test_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    clusters = _draw_clusters(cfg, np.random.default_rng(layout_seq))
    world = SynthWorld(cfg, [], [], CompositeProvider())
    train_rng = np.random.default_rng(train_seq)
    test_rng = np.random.default_rng(test_seq)
    world.train = [_sample(cfg, clusters, train_rng, f"train{i:05d}", world) for i in range(cfg.n_train)]
    world.test = [_sample(cfg, clusters, test_rng, f"test{i:05d}", world) for i in range(cfg.n_test)]

    sizes = {r.id: r.size for r in world.train + world.test}
    if cfg.raster:
        world.provider = CompositeProvider(raster=RasterProvider(world.rasters), sizes=sizes)
    else:
        vectors = {(rid, FULL if st == "full" else OBJECT): v for rid, d in world.vectors.items() for st, v in d.items()}
        world.provider = CompositeProvider(precomputed=PrecomputedProvider(sizes, vectors), sizes=sizes)
    return world


def center_prior_boxes(train: Sequence[AnnotatedImage], test: Sequence[AnnotatedImage]) -> dict[str, BoundingBox]:
    """The mean normalized training object box, placed in every test image."""
    units = np.array(
        [[b.x / r.size.width, b.y / r.size.height, b.w / r.size.width, b.h / r.size.height] for r in train if (b := r.object_box)]
    )
    mx, my, mw, mh = units.mean(axis=0)
    return {r.id: BoundingBox(mx * r.size.width, my * r.size.height, mw * r.size.width, mh * r.size.height) for r in test}
