"""Batch glue: localize many images, collect regression pairs, gather region features."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import StageUnavailableError, TransferError
from .features import FULL, OBJECT, FeatureProvider, Stage
from .geometry import BoundingBox, clamp_box
from .index import AnnotatedImage
from .regression import ALL_CLASSES, RegressionPair, RegressorModel, refine_box
from .transfer import Localizer, TerminationReason, TransferTrace

log = logging.getLogger(__name__)


@dataclass
class Localization:
    id: str
    object_box: BoundingBox | None = None
    parts: dict[str, BoundingBox | None] = field(default_factory=dict)
    reason: TerminationReason | None = None
    iterations: int = 0
    trace: TransferTrace | None = None
    part_traces: dict[str, TransferTrace | None] = field(default_factory=dict)
    error: str | None = None

    def boxes(self) -> dict[str, BoundingBox | None]:
        """Every box under its evaluation name, ``"object"`` included."""
        return {"object": self.object_box, **self.parts}

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "object_box": self.object_box.as_list() if self.object_box else None,
            "parts": {k: (v.as_list() if v else None) for k, v in self.parts.items()},
            "reason": self.reason.value if self.reason else None,
            "iterations": self.iterations,
        }

    def trace_json(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "object": self.trace.to_json() if self.trace else None,
            "parts": {k: (t.to_json() if t else None) for k, t in self.part_traces.items()},
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Localization":
        box = obj.get("object_box")
        reason = obj.get("reason")
        return cls(
            id=str(obj["id"]),
            object_box=BoundingBox.from_list(box) if box else None,
            parts={k: (BoundingBox.from_list(v) if v else None) for k, v in (obj.get("parts") or {}).items()},
            reason=TerminationReason(reason) if reason else None,
            iterations=int(obj.get("iterations", 0)),
        )


def localize_one(
    localizer: Localizer,
    record: AnnotatedImage,
    part_names: Sequence[str] = (),
    oracle_object: bool = False,
    exclude_self: bool = False,
) -> Localization:
    exclude = record.id if exclude_self else None
    result = Localization(record.id)
    if oracle_object:
        if record.object_box is None:
            raise StageUnavailableError(f"image {record.id!r} has no ground-truth object box to seed from")
        result.object_box = record.object_box
    else:
        box, trace = localizer.localize(record.id, exclude=exclude)
        result.object_box, result.trace = box, trace
        result.reason, result.iterations = trace.reason, len(trace)
    if part_names:
        found = localizer.parts(result.object_box, record.id, part_names, exclude=exclude)
        for name, (pbox, ptrace) in found.items():
            result.parts[name] = pbox
            result.part_traces[name] = ptrace
    return result


def localize_records(
    localizer: Localizer,
    records: Sequence[AnnotatedImage],
    part_names: Sequence[str] = (),
    oracle_object: bool = False,
    exclude_self: bool = False,
    workers: int = 1,
    fail_fast: bool = False,
) -> list[Localization]:
    """Localize every record in input order; failures become entries with ``error`` set unless ``fail_fast``."""
    # build shared cropped sets up front so worker threads only read them
    if localizer.cfg.max_iters > 1 or part_names:
        localizer.cropped
        for name in part_names:
            localizer.part_set(name)

    def run(rec: AnnotatedImage) -> Localization:
        try:
            return localize_one(localizer, rec, part_names, oracle_object, exclude_self)
        except TransferError as exc:
            if fail_fast:
                raise
            log.warning("localization failed for %s: %s", rec.id, exc)
            return Localization(rec.id, error=f"{type(exc).__name__}: {exc}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, records))
    return [run(r) for r in records]


def stage_for(region: str) -> Stage:
    if region == "full":
        return FULL
    if region == "object":
        return OBJECT
    return Stage.for_part(region)


def region_feature(provider: FeatureProvider, image_id: str, region: str, box: BoundingBox | None) -> np.ndarray | None:
    """Feature for one named region, or ``None`` when the box or the stage is missing."""
    if region == "full":
        box = provider.image_size(image_id).full_box()
    if box is None:
        return None
    try:
        return provider.provide(image_id, box, stage_for(region))
    except StageUnavailableError:
        return None


def regression_pairs(
    provider: FeatureProvider,
    records: Sequence[AnnotatedImage],
    predictions: Mapping[str, Mapping[str, BoundingBox | None]],
    field_name: str = "object",
    class_specific: bool = True,
) -> list[RegressionPair]:
    """Pair each predicted box with its ground truth and the feature computed on the prediction."""
    pairs = []
    for rec in records:
        T = predictions.get(rec.id, {}).get(field_name)
        G = rec.box(field_name)
        if T is None or G is None or not T.is_proper:
            continue
        phi = region_feature(provider, rec.id, field_name, T)
        if phi is None:
            continue
        label = rec.class_label if (class_specific and rec.class_label is not None) else ALL_CLASSES
        pairs.append(RegressionPair(T, G, phi, label))
    return pairs


def refine_localization(
    model: RegressorModel,
    provider: FeatureProvider,
    loc: Localization,
    class_label: str,
    field_name: str = "object",
    fallback: bool = False,
) -> BoundingBox | None:
    T = loc.boxes().get(field_name)
    if T is None:
        return None
    phi = region_feature(provider, loc.id, field_name, T)
    if phi is None:
        return T
    refined = refine_box(model, class_label, T, phi, fallback=fallback)
    return clamp_box(refined, provider.image_size(loc.id))
