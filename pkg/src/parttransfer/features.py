"""
Feature providers.

Everything downstream of this module sees a feature as a 1-D float64 numpy
array. Two providers ship with the package:

* ``PrecomputedProvider`` serves vectors loaded from FVEC files, keyed by
  ``(image id, stage)``. The region argument is ignored, so the number of
  stages stored bounds how deep the localization loop can go.
* ``RasterProvider`` computes ``grid_descriptor`` on the requested region of
  a grayscale raster, for any stage, so iteration depth is unlimited.

FVEC layout (little endian): ``b"FVEC"``, uint32 count, uint32 dim, then
``count * dim`` float32 values, one vector after another.
"""

from __future__ import annotations

import enum
import os
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Protocol, Union

import numpy as np

from .errors import (
    DimensionError,
    StageUnavailableError,
    UndefinedNormError,
    UnknownImageError,
)
from .geometry import BoundingBox, ImageSize, clamp_box

FVEC_MAGIC = b"FVEC"
DESCRIPTOR_SIDE = 64
DESCRIPTOR_GRID = 4
DESCRIPTOR_BINS = 8
DESCRIPTOR_DIM = DESCRIPTOR_GRID * DESCRIPTOR_GRID * DESCRIPTOR_BINS


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Stage:
    """Which pipeline level a feature describes: ``full``, ``object`` or ``part:<name>``."""

    kind: str
    part: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("full", "object", "part"):
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.kind == "part" and not self.part:
            raise ValueError("part stage needs a non-empty part name")
        if self.kind != "part" and self.part is not None:
            raise ValueError(f"stage {self.kind!r} takes no part name")

    @classmethod
    def for_part(cls, name: str) -> "Stage":
        return cls("part", name)

    @classmethod
    def parse(cls, text: "str | Stage") -> "Stage":
        if isinstance(text, Stage):
            return text
        if text in ("full", "object"):
            return cls(text)
        if text.startswith("part:"):
            return cls("part", text[len("part:"):])
        raise ValueError(f"unknown stage name {text!r}; expected 'full', 'object' or 'part:<name>'")

    def __str__(self) -> str:
        return f"part:{self.part}" if self.kind == "part" else self.kind


FULL = Stage("full")
OBJECT = Stage("object")


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Grayscale image with intensities in [0, 1], shape ``(height, width)``."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"raster must be a non-empty 2-D array, got shape {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def size(self) -> ImageSize:
        return ImageSize(self.width, self.height)


def write_pgm(path: str | os.PathLike, image: RasterImage) -> None:
    """Write an 8-bit binary (P5) portable graymap."""
    data = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 2
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        tokens.append(int(buf[start:pos]))
    return tokens, pos + 1  # exactly one whitespace byte before the raster


def read_pgm(path: str | os.PathLike) -> RasterImage:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    (width, height, maxval), start = _pgm_tokens(buf, 3)
    if maxval < 1 or maxval > 65535:
        raise ValueError(f"{path}: bad PGM maxval {maxval}")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    n = width * height
    raw = np.frombuffer(buf, dtype=dtype, count=n, offset=start)
    return RasterImage(raw.reshape(height, width).astype(np.float64) / maxval)


# ---------------------------------------------------------------------------
# descriptor
# ---------------------------------------------------------------------------


def _resample(pixels: np.ndarray, region: BoundingBox, side: int) -> np.ndarray:
    # half-pixel-center alignment: pixel k covers [k, k+1) and is sampled at k + 0.5
    h, w = pixels.shape
    centers = (np.arange(side, dtype=np.float64) + 0.5) / side
    sx = np.clip(region.x + centers * region.w - 0.5, 0.0, w - 1.0)
    sy = np.clip(region.y + centers * region.h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[None, :]
    fy = (sy - y0)[:, None]
    top = pixels[np.ix_(y0, x0)] * (1.0 - fx) + pixels[np.ix_(y0, x1)] * fx
    bottom = pixels[np.ix_(y1, x0)] * (1.0 - fx) + pixels[np.ix_(y1, x1)] * fx
    return top * (1.0 - fy) + bottom * fy


def grid_descriptor(image: RasterImage, region: BoundingBox) -> np.ndarray:
    """128-d gradient-orientation descriptor of ``region``.

    The region is clamped to the image, resampled to 64x64 bilinearly, and
    its central-difference gradients are binned into 8 signed orientations
    (weighted by magnitude) over a 4x4 grid of cells. The result is
    L2-normalized; a crop with no gradient at all yields the uniform vector
    ``1/sqrt(128)``.

    Raises:
        DegenerateBoxError: if the region has no area inside the image.
    """
    region = clamp_box(region, image.size)
    patch = _resample(image.pixels, region, DESCRIPTOR_SIDE)

    padded = np.pad(patch, 1, mode="edge")
    gx = 0.5 * (padded[1:-1, 2:] - padded[1:-1, :-2])
    gy = 0.5 * (padded[2:, 1:-1] - padded[:-2, 1:-1])
    mag = np.hypot(gx, gy)
    angle = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)
    bins = np.floor(angle / (2.0 * np.pi / DESCRIPTOR_BINS)).astype(np.intp) % DESCRIPTOR_BINS

    cell = DESCRIPTOR_SIDE // DESCRIPTOR_GRID
    rows = np.arange(DESCRIPTOR_SIDE) // cell
    cell_index = rows[:, None] * DESCRIPTOR_GRID + rows[None, :]
    flat = (cell_index * DESCRIPTOR_BINS + bins).ravel()
    hist = np.bincount(flat, weights=mag.ravel(), minlength=DESCRIPTOR_DIM)

    norm = float(np.sqrt(np.dot(hist, hist)))
    if norm <= 1e-12:
        return np.full(DESCRIPTOR_DIM, 1.0 / np.sqrt(DESCRIPTOR_DIM))
    return hist / norm


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


class Metric(str, enum.Enum):
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"

    @classmethod
    def parse(cls, value: "str | Metric") -> "Metric":
        if isinstance(value, Metric):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown metric {value!r}; expected 'cosine' or 'euclidean'") from None


def distance(a: np.ndarray, b: np.ndarray, metric: Metric | str = Metric.COSINE) -> float:
    metric = Metric.parse(metric)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cannot compare vectors of shapes {a.shape} and {b.shape}")
    if metric is Metric.EUCLIDEAN:
        diff = a - b
        return float(np.sqrt(np.dot(diff, diff)))
    na = float(np.sqrt(np.dot(a, a)))
    nb = float(np.sqrt(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        raise UndefinedNormError("cosine distance is undefined for a zero vector")
    return max(0.0, 1.0 - float(np.dot(a, b)) / (na * nb))


def distances(matrix: np.ndarray, query: np.ndarray, metric: Metric | str = Metric.COSINE) -> np.ndarray:
    """Distance from ``query`` to every row of ``matrix``."""
    metric = Metric.parse(metric)
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1 or matrix.ndim != 2 or matrix.shape[1] != query.shape[0]:
        raise DimensionError(f"query of shape {query.shape} does not match index rows of shape {matrix.shape}")
    if metric is Metric.EUCLIDEAN:
        diff = matrix - query
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))
    qn = float(np.sqrt(np.dot(query, query)))
    if qn == 0.0:
        raise UndefinedNormError("cosine distance is undefined for a zero query vector")
    norms = np.sqrt(np.einsum("ij,ij->i", matrix, matrix))
    if np.any(norms == 0.0):
        raise UndefinedNormError("index holds a zero vector; cosine distance is undefined")
    return np.maximum(0.0, 1.0 - (matrix @ query) / (norms * qn))


# ---------------------------------------------------------------------------
# FVEC files
# ---------------------------------------------------------------------------


def pack_fvec(vectors: np.ndarray) -> bytes:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise DimensionError(f"FVEC payload must be 2-D, got shape {vectors.shape}")
    count, dim = vectors.shape
    return FVEC_MAGIC + struct.pack("<II", count, dim) + vectors.astype("<f4").tobytes()


def unpack_fvec(buf: bytes, offset: int = 0, *, source: str = "<bytes>") -> tuple[np.ndarray, int]:
    """Decode one FVEC block at ``offset``; returns ``(float32 array, end offset)``."""
    if buf[offset : offset + 4] != FVEC_MAGIC:
        raise ValueError(f"{source}: missing FVEC magic")
    if len(buf) < offset + 12:
        raise ValueError(f"{source}: truncated FVEC header")
    count, dim = struct.unpack_from("<II", buf, offset + 4)
    start = offset + 12
    end = start + 4 * count * dim
    if len(buf) < end:
        raise ValueError(f"{source}: FVEC payload truncated ({len(buf) - start} of {end - start} bytes)")
    data = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=start).reshape(count, dim)
    return data.astype(np.float32), end


def write_fvec(path: str | os.PathLike, vectors: np.ndarray) -> None:
    Path(path).write_bytes(pack_fvec(vectors))


def read_fvec(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    data, end = unpack_fvec(buf, source=str(path))
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes after FVEC payload")
    return data


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------


class FeatureProvider(Protocol):
    def image_size(self, image_id: str) -> ImageSize: ...

    def provide(self, image_id: str, region: BoundingBox, stage: Stage) -> np.ndarray: ...


def _frozen(vec: np.ndarray) -> np.ndarray:
    out = np.array(vec, dtype=np.float64)
    if out.ndim != 1:
        raise DimensionError(f"feature vectors must be 1-D, got shape {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError("feature vector holds non-finite values")
    out.setflags(write=False)
    return out


class PrecomputedProvider:
    """Serves stored vectors; ``region`` is accepted for interface parity and ignored."""

    def __init__(self, sizes: Mapping[str, ImageSize], vectors: Mapping[tuple[str, Stage], np.ndarray]):
        self._sizes = dict(sizes)
        self._vectors = {(iid, Stage.parse(st)): _frozen(v) for (iid, st), v in vectors.items()}
        dims = {v.shape[0] for v in self._vectors.values()}
        if len(dims) > 1:
            raise DimensionError(f"precomputed vectors have mixed dims {sorted(dims)}")
        self.dim = dims.pop() if dims else 0

    def image_size(self, image_id: str) -> ImageSize:
        try:
            return self._sizes[image_id]
        except KeyError:
            raise UnknownImageError(f"unknown image {image_id!r}") from None

    def has(self, image_id: str, stage: Stage) -> bool:
        return (image_id, stage) in self._vectors

    def provide(self, image_id: str, region: BoundingBox, stage: Stage) -> np.ndarray:
        if image_id not in self._sizes:
            raise UnknownImageError(f"unknown image {image_id!r}")
        try:
            return self._vectors[(image_id, stage)]
        except KeyError:
            raise StageUnavailableError(f"no precomputed {stage} feature for image {image_id!r}") from None


RasterSource = Union[RasterImage, str, os.PathLike]


class RasterProvider:
    """Computes ``grid_descriptor`` on demand; PGM paths are read lazily and cached."""

    dim = DESCRIPTOR_DIM

    def __init__(self, images: Mapping[str, RasterSource]):
        self._sources = dict(images)
        self._cache: dict[str, RasterImage] = {}
        self._lock = threading.Lock()

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._sources

    def __len__(self) -> int:
        return len(self._sources)

    def raster(self, image_id: str) -> RasterImage:
        try:
            src = self._sources[image_id]
        except KeyError:
            raise UnknownImageError(f"unknown image {image_id!r}") from None
        if isinstance(src, RasterImage):
            return src
        with self._lock:
            img = self._cache.get(image_id)
            if img is None:
                img = read_pgm(src)
                self._cache[image_id] = img
        return img

    def image_size(self, image_id: str) -> ImageSize:
        return self.raster(image_id).size

    def provide(self, image_id: str, region: BoundingBox, stage: Stage) -> np.ndarray:
        vec = grid_descriptor(self.raster(image_id), region)
        vec.setflags(write=False)
        return vec


@dataclass
class CompositeProvider:
    """Prefers the raster route for images that have pixels, else stored vectors."""

    raster: RasterProvider | None = None
    precomputed: PrecomputedProvider | None = None
    sizes: dict[str, ImageSize] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        if self.raster is not None and len(self.raster):
            return self.raster.dim
        return self.precomputed.dim if self.precomputed is not None else 0

    def image_size(self, image_id: str) -> ImageSize:
        if image_id in self.sizes:
            return self.sizes[image_id]
        if self.raster is not None and image_id in self.raster:
            return self.raster.image_size(image_id)
        if self.precomputed is not None:
            return self.precomputed.image_size(image_id)
        raise UnknownImageError(f"unknown image {image_id!r}")

    def provide(self, image_id: str, region: BoundingBox, stage: Stage) -> np.ndarray:
        if self.raster is not None and image_id in self.raster:
            return self.raster.provide(image_id, region, stage)
        if self.precomputed is not None:
            return self.precomputed.provide(image_id, region, stage)
        raise UnknownImageError(f"unknown image {image_id!r}")


__all__ = [
    "CompositeProvider",
    "DESCRIPTOR_DIM",
    "FULL",
    "FeatureProvider",
    "Metric",
    "OBJECT",
    "PrecomputedProvider",
    "RasterImage",
    "RasterProvider",
    "Stage",
    "distance",
    "distances",
    "grid_descriptor",
    "pack_fvec",
    "read_fvec",
    "read_pgm",
    "unpack_fvec",
    "write_fvec",
    "write_pgm",
]
