"""
Localization and recognition metrics.

PCP counts a predicted box as a hit at threshold ``tau`` when its IoU with the
ground truth is ``>= tau`` (``strict=True`` switches to ``>``). Samples with
no prediction or no ground-truth box for a part are skipped and counted;
``absent_as_miss=True`` instead scores a missing prediction as a miss
whenever the ground truth exists. ``"object"`` is treated as a part name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import EmptyInputError, UnknownImageError
from .geometry import BoundingBox, iou
from .index import AnnotatedImage

DEFAULT_THRESHOLDS = (0.5, 0.4, 0.3)

Predictions = Mapping[str, Mapping[str, "BoundingBox | None"]]


def _as_truth(ground_truth: Mapping[str, AnnotatedImage] | Iterable[AnnotatedImage]) -> dict[str, AnnotatedImage]:
    if isinstance(ground_truth, Mapping):
        return dict(ground_truth)
    records = getattr(ground_truth, "records", ground_truth)
    return {r.id: r for r in records}


@dataclass
class PcpReport:
    thresholds: tuple[float, ...]
    parts: tuple[str, ...]
    pcp: dict[str, dict[float, float]]
    hits: dict[str, dict[float, int]]
    evaluated: dict[str, int]
    skipped: dict[str, int]
    total: int
    strict: bool = False
    mean_iou: dict[str, float] = field(default_factory=dict)

    def is_monotone(self) -> bool:
        for part in self.parts:
            ordered = sorted(self.thresholds)
            vals = [self.pcp[part][t] for t in ordered]
            if any(b > a for a, b in zip(vals, vals[1:])):
                return False
        return True

    def to_json(self) -> dict:
        return {
            "thresholds": list(self.thresholds),
            "strict": self.strict,
            "total": self.total,
            "parts": {
                p: {
                    "pcp": {f"{t:g}": self.pcp[p][t] for t in self.thresholds},
                    "evaluated": self.evaluated[p],
                    "skipped": self.skipped[p],
                    "mean_iou": self.mean_iou.get(p),
                }
                for p in self.parts
            },
        }


def pcp(
    predictions: Predictions,
    ground_truth: Mapping[str, AnnotatedImage] | Iterable[AnnotatedImage],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    parts: Sequence[str] | None = None,
    strict: bool = False,
    absent_as_miss: bool = False,
) -> PcpReport:
    """Percentage of correctly localized parts per part and threshold.

    Raises:
        UnknownImageError: a prediction id is missing from the ground truth.
        ValueError: thresholds empty or outside (0, 1].
    """
    if not thresholds:
        raise ValueError("need at least one threshold")
    if any(not 0.0 < t <= 1.0 for t in thresholds):
        raise ValueError(f"thresholds must lie in (0, 1], got {list(thresholds)}")
    truth = _as_truth(ground_truth)
    for pid in predictions:
        if pid not in truth:
            raise UnknownImageError(f"prediction for unknown image {pid!r}")
    if parts is None:
        seen: dict[str, None] = {}
        for per_image in predictions.values():
            for name in per_image:
                seen.setdefault(name, None)
        parts = list(seen)

    thresholds = tuple(float(t) for t in thresholds)
    report = PcpReport(thresholds, tuple(parts), {}, {}, {}, {}, len(truth), strict)
    for part in parts:
        hits = {t: 0 for t in thresholds}
        evaluated = skipped = 0
        iou_sum = 0.0
        # sorted ids keep the float sum independent of input order
        for rid in sorted(truth):
            gt = truth[rid].box(part)
            pred = predictions.get(rid, {}).get(part)
            if gt is None or (pred is None and not absent_as_miss):
                skipped += 1
                continue
            evaluated += 1
            if pred is None:
                continue
            v = iou(pred, gt)
            iou_sum += v
            for t in thresholds:
                if (v > t) if strict else (v >= t):
                    hits[t] += 1
        report.hits[part] = hits
        report.pcp[part] = {t: (100.0 * hits[t] / evaluated if evaluated else 0.0) for t in thresholds}
        report.evaluated[part] = evaluated
        report.skipped[part] = skipped
        report.mean_iou[part] = iou_sum / evaluated if evaluated else 0.0
    return report


def accuracy(predictions: Mapping[str, str], ground_truth: Mapping[str, AnnotatedImage] | Iterable[AnnotatedImage]) -> float:
    """Percentage of ids whose predicted class equals the labelled class."""
    if not predictions:
        raise EmptyInputError("no predictions to score")
    truth = _as_truth(ground_truth)
    correct = 0
    for rid, label in predictions.items():
        if rid not in truth:
            raise UnknownImageError(f"prediction for unknown image {rid!r}")
        gt = truth[rid].class_label
        if gt is None:
            raise ValueError(f"image {rid!r} has no class label")
        correct += str(label) == gt
    return 100.0 * correct / len(predictions)


def ground_truth_predictions(records: Iterable[AnnotatedImage], parts: Sequence[str]) -> dict[str, dict[str, BoundingBox | None]]:
    return {r.id: {p: r.box(p) for p in parts} for r in records}


def sanity_failures(
    report: PcpReport,
    ground_truth: Mapping[str, AnnotatedImage] | Iterable[AnnotatedImage],
) -> list[str]:
    """Checks run on every evaluation: PCP is non-increasing in the threshold and
    ground truth scored against itself is 100% wherever anything is evaluated."""
    problems = []
    if not report.is_monotone():
        problems.append("PCP increases with the IoU threshold")
    truth = _as_truth(ground_truth)
    self_report = pcp(
        ground_truth_predictions(truth.values(), report.parts), truth, report.thresholds, report.parts, strict=False
    )
    for part in report.parts:
        if self_report.evaluated[part] and any(v != 100.0 for v in self_report.pcp[part].values()):
            problems.append(f"ground truth scores below 100% against itself for {part!r}")
    return problems


def _fmt(v: float) -> str:
    return f"{v:.1f}"


def render_pcp_table(rows: Mapping[str, PcpReport], title: str = "PCP (%)") -> str:
    """Rows of runs, columns of part x threshold; the layout of an M-sweep table."""
    if not rows:
        return f"{title}\n(no runs)\n"
    first = next(iter(rows.values()))
    parts, thresholds = first.parts, first.thresholds
    op = ">" if first.strict else ">="
    header1 = [""] + [p for p in parts for _ in thresholds]
    header2 = [""] + [f"{op}{t:g}" for _ in parts for t in thresholds]
    body = []
    for label, rep in rows.items():
        body.append([label] + [_fmt(rep.pcp.get(p, {}).get(t, 0.0)) for p in parts for t in thresholds])
    table = [header1, header2] + body
    widths = [max(len(r[i]) for r in table) for i in range(len(header1))]
    lines = [title]
    for r in table:
        lines.append(" | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def render_accuracy_table(rows: Mapping[str, float], title: str = "Recognition") -> str:
    if not rows:
        return f"{title}\n(no runs)\n"
    width = max(len("Input region"), *(len(k) for k in rows))
    lines = [title, f"{'Input region'.ljust(width)} | Accuracy (%)"]
    for label, acc in rows.items():
        lines.append(f"{label.ljust(width)} | {acc:12.1f}")
    return "\n".join(lines) + "\n"
