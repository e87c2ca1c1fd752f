"""
One-vs-all linear SVMs over concatenated region features.

Each class gets a hinge-loss classifier trained by stochastic subgradient
descent (Pegasos schedule, step ``1/(lambda t)`` with ``lambda = 1/(C n)``).
The bias is folded in as a weight on a constant-1 input, so it is
regularized together with ``w``. All classes share one seeded sample order
per epoch, which lets the update run on the whole weight matrix at once.
After every epoch the full objective is evaluated and the best iterate so
far is kept per class.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionError, EmptyInputError
from .modelio import read_model, write_model

DEFAULT_REGIONS = ("full", "object", "head", "body")


@dataclass(frozen=True)
class RegionLayout:
    """Ordered ``(region name, dim)`` pairs describing a concatenated feature."""

    regions: tuple[tuple[str, int], ...]

    @classmethod
    def uniform(cls, names: Sequence[str], dim: int) -> "RegionLayout":
        return cls(tuple((n, int(dim)) for n in names))

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.regions]

    @property
    def total_dim(self) -> int:
        return sum(d for _, d in self.regions)

    def to_json(self) -> list:
        return [[n, d] for n, d in self.regions]

    @classmethod
    def from_json(cls, data: Sequence) -> "RegionLayout":
        return cls(tuple((str(n), int(d)) for n, d in data))


def concat_regions(features: Mapping[str, np.ndarray | None], layout: RegionLayout) -> np.ndarray:
    """Concatenate region features in layout order, zero-filling absent regions."""
    parts = []
    for name, dim in layout.regions:
        vec = features.get(name)
        if vec is None:
            parts.append(np.zeros(dim))
            continue
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (dim,):
            raise DimensionError(f"region {name!r} has shape {vec.shape}, layout expects ({dim},)")
        parts.append(vec)
    return np.concatenate(parts) if parts else np.zeros(0)


@dataclass(frozen=True, eq=False)
class ClassifierModel:
    classes: tuple[str, ...]
    weights: np.ndarray  # (n_classes, dim)
    biases: np.ndarray  # (n_classes,)
    C: float = 1.0
    layout: RegionLayout | None = None
    history: np.ndarray | None = field(default=None, repr=False)  # (epochs, n_classes) objective

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def save(self, path: str | os.PathLike) -> None:
        header = {
            "kind": "classifier",
            "classes": list(self.classes),
            "dim": self.dim,
            "C": self.C,
            "layout": self.layout.to_json() if self.layout else None,
            "bias_column": True,
        }
        write_model(path, header, np.hstack([self.weights, self.biases[:, None]]))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ClassifierModel":
        header, rows = read_model(path, "classifier")
        classes = tuple(header["classes"])
        dim = int(header["dim"])
        if rows.shape != (len(classes), dim + 1):
            raise ValueError(f"{path}: weight block has shape {rows.shape}, header implies {(len(classes), dim + 1)}")
        layout = RegionLayout.from_json(header["layout"]) if header.get("layout") else None
        return cls(classes, rows[:, :dim].copy(), rows[:, dim].copy(), float(header.get("C", 1.0)), layout)


def svm_objective(weights: np.ndarray, biases: np.ndarray, X: np.ndarray, Y: np.ndarray, C: float) -> np.ndarray:
    """Per-class ``(|w|^2 + b^2) / (2C) + sum hinge``; ``Y`` holds +-1 labels, shape (n, K)."""
    margins = Y * (X @ weights.T + biases)
    hinge = np.maximum(0.0, 1.0 - margins).sum(axis=0)
    reg = (np.einsum("kd,kd->k", weights, weights) + biases**2) / (2.0 * C)
    return reg + hinge


def train_svm(
    examples: Sequence[tuple[np.ndarray, str]],
    C: float = 1.0,
    epochs: int = 50,
    seed: int = 0,
    layout: RegionLayout | None = None,
) -> ClassifierModel:
    """Train one-vs-all linear SVMs; identical inputs and seed give an identical model.

    Raises:
        EmptyInputError: no examples, or fewer than two classes.
        DimensionError: features of different lengths.
    """
    if not examples:
        raise EmptyInputError("train_svm needs training examples")
    if C <= 0:
        raise ValueError(f"C must be positive, got {C}")
    if epochs < 1:
        raise ValueError(f"epochs must be positive, got {epochs}")
    shapes = {np.asarray(x).shape for x, _ in examples}
    if len(shapes) != 1:
        raise DimensionError(f"training features have inconsistent shapes {sorted(shapes)}")
    classes = tuple(sorted({str(label) for _, label in examples}))
    if len(classes) < 2:
        raise EmptyInputError(f"one-vs-all training needs at least two classes, got {list(classes)}")

    X = np.vstack([np.asarray(x, dtype=np.float64) for x, _ in examples])
    labels = np.array([classes.index(str(label)) for _, label in examples])
    n, d = X.shape
    K = len(classes)
    Y = np.where(labels[:, None] == np.arange(K)[None, :], 1.0, -1.0)
    Xa = np.hstack([X, np.ones((n, 1))])

    lam = 1.0 / (C * n)
    radius = 1.0 / np.sqrt(lam)
    W = np.zeros((K, d + 1))
    best_W = W.copy()
    best_obj = svm_objective(W[:, :d], W[:, d], X, Y, C)
    history = np.empty((epochs, K))
    rng = np.random.default_rng(seed)
    t = 0
    for epoch in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            x = Xa[i]
            y = Y[i]
            violated = y * (W @ x) < 1.0
            W *= 1.0 - eta * lam
            if violated.any():
                W[violated] += eta * np.outer(y[violated], x)
            norms = np.sqrt(np.einsum("kd,kd->k", W, W))
            over = norms > radius
            if over.any():
                W[over] *= (radius / norms[over])[:, None]
        obj = svm_objective(W[:, :d], W[:, d], X, Y, C)
        better = obj < best_obj
        best_W[better] = W[better]
        best_obj = np.where(better, obj, best_obj)
        history[epoch] = best_obj

    return ClassifierModel(classes, best_W[:, :d].copy(), best_W[:, d].copy(), float(C), layout, history)


def predict(model: ClassifierModel, feature: np.ndarray) -> tuple[str, dict[str, float]]:
    """Argmax of ``w_c . x + b_c``; ties go to the class listed first."""
    x = np.asarray(feature, dtype=np.float64)
    if x.shape != (model.dim,):
        raise DimensionError(f"feature has shape {x.shape}, classifier expects ({model.dim},)")
    scores = model.weights @ x + model.biases
    best = int(np.argmax(scores))
    return model.classes[best], {c: float(s) for c, s in zip(model.classes, scores)}
