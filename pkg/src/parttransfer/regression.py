"""
Class-specific ridge regression for box refinement.

A predicted box ``T`` is corrected towards the ground truth ``G`` by four
linear functions of the feature computed on ``T``::

    Gx = Tw * fx + Tx        Gw = Tw * exp(fw)
    Gy = Th * fy + Ty        Gh = Th * exp(fh)

so the regression targets are ``((Gx-Tx)/Tw, (Gy-Ty)/Th, log(Gw/Tw), log(Gh/Th))``.
``TargetConvention.LITERAL`` swaps the translation denominators for ``Tx``
and ``Ty`` (and the decode accordingly); it exists for comparison only.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from .errors import DegenerateBoxError, DimensionError, EmptyInputError, UnknownClassError
from .geometry import BoundingBox
from .modelio import read_model, write_model

TARGETS = ("x", "y", "w", "h")
ALL_CLASSES = "*"


class TargetConvention(str, enum.Enum):
    SIZE = "size"
    LITERAL = "literal"


def encode_targets(
    T: BoundingBox, G: BoundingBox, convention: TargetConvention | str = TargetConvention.SIZE
) -> tuple[float, float, float, float]:
    convention = TargetConvention(convention)
    if T.w <= 0 or T.h <= 0 or G.w <= 0 or G.h <= 0:
        raise DegenerateBoxError("regression targets need boxes with positive width and height")
    if convention is TargetConvention.SIZE:
        dx, dy = T.w, T.h
    else:
        if T.x == 0 or T.y == 0:
            raise DegenerateBoxError("literal targets divide by the box corner, which is zero here")
        dx, dy = T.x, T.y
    return ((G.x - T.x) / dx, (G.y - T.y) / dy, math.log(G.w / T.w), math.log(G.h / T.h))


def decode_box(
    T: BoundingBox, f: Sequence[float], convention: TargetConvention | str = TargetConvention.SIZE
) -> BoundingBox:
    convention = TargetConvention(convention)
    fx, fy, fw, fh = (float(v) for v in f)
    sx, sy = (T.w, T.h) if convention is TargetConvention.SIZE else (T.x, T.y)
    return BoundingBox(sx * fx + T.x, sy * fy + T.y, T.w * math.exp(fw), T.h * math.exp(fh))


@dataclass(frozen=True)
class RegressionPair:
    predicted: BoundingBox
    truth: BoundingBox
    feature: np.ndarray
    class_label: str = ALL_CLASSES


def ridge_solve(phi: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    """Minimizer of ``||y - phi w||^2 + lam ||w||^2`` via a Cholesky solve.

    ``y`` may hold several targets as columns; the result has one column each.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    gram = phi.T @ phi
    gram[np.diag_indices_from(gram)] += lam
    factor = linalg.cho_factor(gram, lower=True, check_finite=True)
    return linalg.cho_solve(factor, phi.T @ y)


def ridge_objective(w: np.ndarray, phi: np.ndarray, y: np.ndarray, lam: float) -> float:
    r = y - phi @ w
    return float(r @ r + lam * (w @ w))


def ridge_gradient(w: np.ndarray, phi: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    return 2.0 * phi.T @ (phi @ w - y) + 2.0 * lam * w


@dataclass(frozen=True, eq=False)
class RegressorModel:
    """Four weight vectors (x, y, w, h) per class, stored as rows of a ``(4, dim)`` array."""

    weights: Mapping[str, np.ndarray]
    lam: float
    dim: int
    convention: TargetConvention = TargetConvention.SIZE
    intercept: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def classes(self) -> list[str]:
        return sorted(self.weights)

    def design(self, feature: np.ndarray) -> np.ndarray:
        phi = np.asarray(feature, dtype=np.float64)
        if self.intercept:
            phi = np.append(phi, 1.0)
        if phi.shape != (self.dim,):
            raise DimensionError(f"feature has {phi.shape[0]} entries after intercept, model expects {self.dim}")
        return phi

    def offsets(self, class_label: str, feature: np.ndarray) -> np.ndarray:
        try:
            w = self.weights[class_label]
        except KeyError:
            if ALL_CLASSES in self.weights:
                w = self.weights[ALL_CLASSES]
            else:
                raise UnknownClassError(f"regressor has no model for class {class_label!r}") from None
        return w @ self.design(feature)

    @classmethod
    def zeros(cls, classes: Sequence[str], dim: int, lam: float = 1.0) -> "RegressorModel":
        return cls({c: np.zeros((4, dim)) for c in classes}, lam, dim)

    def save(self, path: str | os.PathLike) -> None:
        classes = self.classes
        header = {
            "kind": "regressor",
            "classes": classes,
            "dim": self.dim,
            "lambda": self.lam,
            "convention": self.convention.value,
            "intercept": self.intercept,
            "targets": list(TARGETS),
            "meta": self.meta,
        }
        rows = np.vstack([self.weights[c] for c in classes]) if classes else np.zeros((0, self.dim))
        write_model(path, header, rows)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RegressorModel":
        header, rows = read_model(path, "regressor")
        classes = header["classes"]
        dim = int(header["dim"])
        if rows.shape != (4 * len(classes), dim):
            raise ValueError(f"{path}: weight block has shape {rows.shape}, header implies {(4 * len(classes), dim)}")
        weights = {c: rows[4 * i : 4 * i + 4] for i, c in enumerate(classes)}
        return cls(
            weights,
            float(header["lambda"]),
            dim,
            TargetConvention(header.get("convention", "size")),
            bool(header.get("intercept", False)),
            header.get("meta", {}),
        )


def fit_regressor(
    pairs: Sequence[RegressionPair],
    lam: float = 1.0,
    convention: TargetConvention | str = TargetConvention.SIZE,
    intercept: bool = False,
) -> RegressorModel:
    """Fit one closed-form ridge model per class and target.

    Raises:
        EmptyInputError: no pairs.
        DimensionError: features of different lengths.
        ValueError: ``lam`` is not positive.
    """
    if lam <= 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not pairs:
        raise EmptyInputError("fit_regressor needs at least one training pair")
    convention = TargetConvention(convention)
    dims = {np.asarray(p.feature).shape for p in pairs}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise DimensionError(f"training features have inconsistent shapes {sorted(dims)}")

    by_class: dict[str, list[RegressionPair]] = {}
    for p in pairs:
        by_class.setdefault(p.class_label, []).append(p)

    dim = next(iter(dims))[0] + (1 if intercept else 0)
    weights = {}
    for label in sorted(by_class):
        group = by_class[label]
        phi = np.vstack([np.asarray(p.feature, dtype=np.float64) for p in group])
        if intercept:
            phi = np.hstack([phi, np.ones((phi.shape[0], 1))])
        y = np.array([encode_targets(p.predicted, p.truth, convention) for p in group])
        weights[label] = ridge_solve(phi, y, lam).T.copy()
    return RegressorModel(weights, float(lam), dim, convention, intercept)


def refine_box(
    model: RegressorModel,
    class_label: str,
    T: BoundingBox,
    feature: np.ndarray,
    fallback: bool = False,
) -> BoundingBox:
    """Apply the class's regressor to ``T``. The caller clamps the result to the image.

    With ``fallback`` an unknown class returns ``T`` instead of raising.
    """
    try:
        f = model.offsets(class_label, feature)
    except UnknownClassError:
        if fallback:
            return T
        raise
    return decode_box(T, f, model.convention)
