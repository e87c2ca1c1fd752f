"""
Bounding-box arithmetic.

Boxes are ``(x, y, w, h)`` in continuous pixel units with the origin at the
top-left corner of the image and ``(x, y)`` the upper-left corner of the box.
Nothing in here rounds; rounding only happens at raster I/O.

Fusion always happens in a shared frame. Internally that frame is the unit
square, so ``to_unit`` / ``from_unit`` are the two halves of ``map_box``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import DegenerateBoxError, EmptyInputError, InvalidSizeError, NoOverlapError


@dataclass(frozen=True)
class ImageSize:
    width: float
    height: float

    def __post_init__(self) -> None:
        w, h = float(self.width), float(self.height)
        if not (math.isfinite(w) and math.isfinite(h)) or w <= 0 or h <= 0:
            raise InvalidSizeError(f"image size must be positive and finite, got {self.width}x{self.height}")
        object.__setattr__(self, "width", w)
        object.__setattr__(self, "height", h)

    def full_box(self) -> "BoundingBox":
        return BoundingBox(0.0, 0.0, self.width, self.height)


UNIT = ImageSize(1.0, 1.0)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box. Width and height may be zero but never negative."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (float(self.x), float(self.y), float(self.w), float(self.h))
        if not all(math.isfinite(v) for v in vals):
            raise DegenerateBoxError(f"box has non-finite coordinates: {vals}")
        if vals[2] < 0 or vals[3] < 0:
            raise DegenerateBoxError(f"box has negative extent: {vals}")
        for name, v in zip("xywh", vals):
            object.__setattr__(self, name, v)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls(x1, y1, x2 - x1, y2 - y1)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BoundingBox":
        if len(values) != 4:
            raise DegenerateBoxError(f"a box needs 4 numbers, got {len(values)}")
        return cls(*values)

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def is_proper(self) -> bool:
        return self.w > 0 and self.h > 0

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    def frame(self) -> ImageSize:
        """The frame of an image cropped to this box."""
        return ImageSize(self.w, self.h)

    def translate(self, dx: float, dy: float) -> "BoundingBox":
        return BoundingBox(self.x + dx, self.y + dy, self.w, self.h)

    def contains(self, other: "BoundingBox", tol: float = 0.0) -> bool:
        return (
            self.x <= other.x + tol
            and self.y <= other.y + tol
            and self.x2 >= other.x2 - tol
            and self.y2 >= other.y2 - tol
        )


class FusionMode(str, enum.Enum):
    UNION = "union"
    AVERAGE = "average"
    INTERSECTION = "intersection"

    @classmethod
    def parse(cls, value: "str | FusionMode") -> "FusionMode":
        if isinstance(value, FusionMode):
            return value
        try:
            return cls(value.lower())
        except ValueError:
            raise ValueError(f"unknown fusion mode {value!r}; expected one of {[m.value for m in cls]}") from None


def map_box(box: BoundingBox, src: ImageSize, dst: ImageSize) -> BoundingBox:
    """Rescale ``box`` from frame ``src`` into frame ``dst`` axis by axis.

    Out-of-frame coordinates are mapped as-is rather than rejected.
    """
    if not isinstance(src, ImageSize) or not isinstance(dst, ImageSize):
        raise InvalidSizeError("map_box needs ImageSize frames")
    sx = dst.width / src.width
    sy = dst.height / src.height
    return BoundingBox(box.x * sx, box.y * sy, box.w * sx, box.h * sy)


def to_unit(box: BoundingBox, frame: ImageSize) -> BoundingBox:
    return map_box(box, frame, UNIT)


def from_unit(box: BoundingBox, frame: ImageSize) -> BoundingBox:
    return map_box(box, UNIT, frame)


def hull(boxes: Iterable[BoundingBox]) -> BoundingBox:
    boxes = list(boxes)
    if not boxes:
        raise EmptyInputError("cannot take the hull of zero boxes")
    return BoundingBox.from_corners(
        min(b.x for b in boxes),
        min(b.y for b in boxes),
        max(b.x2 for b in boxes),
        max(b.y2 for b in boxes),
    )


def intersection(boxes: Iterable[BoundingBox]) -> BoundingBox:
    boxes = list(boxes)
    if not boxes:
        raise EmptyInputError("cannot intersect zero boxes")
    x1 = max(b.x for b in boxes)
    y1 = max(b.y for b in boxes)
    x2 = min(b.x2 for b in boxes)
    y2 = min(b.y2 for b in boxes)
    if x2 <= x1 or y2 <= y1:
        raise NoOverlapError(f"{len(boxes)} boxes have no common overlap")
    return BoundingBox.from_corners(x1, y1, x2, y2)


def fuse_boxes(boxes: Sequence[BoundingBox], mode: FusionMode | str = FusionMode.UNION) -> BoundingBox:
    """Merge boxes that already share one coordinate frame.

    Union is the smallest box containing every input, Average is the
    component-wise mean of ``(x, y, w, h)``, Intersection is the common
    overlap (``NoOverlapError`` when there is none).
    """
    mode = FusionMode.parse(mode)
    if not boxes:
        raise EmptyInputError("fuse_boxes needs at least one box")
    if mode is FusionMode.UNION:
        return hull(boxes)
    if mode is FusionMode.INTERSECTION:
        return intersection(boxes)
    # math.fsum keeps the mean independent of input order
    n = len(boxes)
    return BoundingBox(
        math.fsum(b.x for b in boxes) / n,
        math.fsum(b.y for b in boxes) / n,
        math.fsum(b.w for b in boxes) / n,
        math.fsum(b.h for b in boxes) / n,
    )


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union. Zero-area inputs give 0 instead of NaN."""
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # corner-based areas so that iou(a, a) is exactly 1 in floating point
    area_a = (a.x2 - a.x) * (a.y2 - a.y)
    area_b = (b.x2 - b.x) * (b.y2 - b.y)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


def clamp_box(box: BoundingBox, size: ImageSize) -> BoundingBox:
    x1 = max(box.x, 0.0)
    y1 = max(box.y, 0.0)
    x2 = min(box.x2, size.width)
    y2 = min(box.y2, size.height)
    if x2 <= x1 or y2 <= y1:
        raise DegenerateBoxError(f"box {box.as_list()} has no area inside a {size.width}x{size.height} image")
    return BoundingBox.from_corners(x1, y1, x2, y2)


def clip_to(box: BoundingBox, region: BoundingBox) -> BoundingBox:
    """Like ``clamp_box`` but against an arbitrary region instead of an image frame."""
    local = clamp_box(box.translate(-region.x, -region.y), region.frame())
    return local.translate(region.x, region.y)


def corner_error(a: BoundingBox, b: BoundingBox) -> float:
    """Mean Euclidean distance between matching top-left and bottom-right corners."""
    tl = math.hypot(a.x - b.x, a.y - b.y)
    br = math.hypot(a.x2 - b.x2, a.y2 - b.y2)
    return 0.5 * (tl + br)
