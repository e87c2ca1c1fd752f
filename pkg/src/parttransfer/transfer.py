"""
Iterative object-level and part-level box transfer.

One transfer step retrieves the M nearest training examples, maps each of
their boxes from the example's own frame into the unit square, fuses them,
and maps the fused box into the query's current frame. The object loop
starts from the whole image, then crops the query to the box it just found
and repeats against a training set whose images were cropped the same way
(``rebuild_training_crops``). Part localization runs the same loop inside
the localized object.

All boxes reported in traces and results are in input-image pixels.
"""

from __future__ import annotations

import enum
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence, TypeVar

import numpy as np

from .errors import (
    AnnotationUnavailableError,
    ConfigError,
    EmptyIndexError,
    NoOverlapError,
    StageUnavailableError,
)
from .features import FULL, OBJECT, FeatureProvider, Metric, Stage
from .geometry import BoundingBox, FusionMode, ImageSize, clamp_box, clip_to, from_unit, fuse_boxes, hull, iou, to_unit
from .index import AnnotatedImage, Neighbor, TrainingIndex, nearest_rows
from .recognition import ClassifierModel, predict

T = TypeVar("T")
R = TypeVar("R")


class TerminationReason(str, enum.Enum):
    STABILITY = "stability"
    CLASSIFIER_SCORE = "classifier_score"
    MAX_ITERS = "max_iters"
    STAGE_EXHAUSTED = "stage_exhausted"


@dataclass(frozen=True)
class TransferConfig:
    m: int = 2
    fusion: FusionMode = FusionMode.UNION
    max_iters: int = 3
    stability_iou: float = 0.9
    score_threshold: float | None = None
    metric: Metric = Metric.COSINE
    # size of the shared fusion frame; fusion is scale free so this is informational
    s_uni: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "fusion", FusionMode.parse(self.fusion))
        object.__setattr__(self, "metric", Metric.parse(self.metric))
        if int(self.m) != self.m or self.m < 1:
            raise ConfigError(f"M must be a positive integer, got {self.m}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError(f"max_iters must be a positive integer, got {self.max_iters}")
        if not 0.0 < self.stability_iou <= 1.0:
            raise ConfigError(f"stability_iou must lie in (0, 1], got {self.stability_iou}")

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "fusion": self.fusion.value,
            "max_iters": self.max_iters,
            "stability_iou": self.stability_iou,
            "score_threshold": self.score_threshold,
            "metric": self.metric.value,
            "s_uni": self.s_uni,
        }


@dataclass(frozen=True)
class TraceStep:
    box: BoundingBox
    neighbors: tuple[Neighbor, ...]


@dataclass
class TransferTrace:
    steps: list[TraceStep] = field(default_factory=list)
    reason: TerminationReason | None = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def boxes(self) -> list[BoundingBox]:
        return [s.box for s in self.steps]

    def to_json(self) -> dict:
        return {
            "reason": self.reason.value if self.reason else None,
            "steps": [
                {
                    "box": s.box.as_list(),
                    "neighbors": [n.id for n in s.neighbors],
                    "distances": [n.distance for n in s.neighbors],
                }
                for s in self.steps
            ],
        }


class BoxSource(Protocol):
    """Something ``transfer_step`` can retrieve neighbors and boxes from."""

    def knn(self, query: np.ndarray, stage: Stage, m: int, exclude: str | None = None) -> list[Neighbor]: ...

    def annotation(self, row: int, field_name: str) -> tuple[BoundingBox, ImageSize] | None: ...


@dataclass(frozen=True, eq=False)
class CroppedTrainingSet:
    """Training images cropped around a predicted box that was enlarged to keep the annotation.

    ``crops[i]`` is in record ``i``'s own pixel frame and always contains the
    box named by ``anchor`` (``"object"`` or a part name) when that box is
    annotated. ``features`` holds one row per record computed on the crop.
    """

    records: tuple[AnnotatedImage, ...]
    predicted: tuple[BoundingBox, ...]
    crops: tuple[BoundingBox, ...]
    features: np.ndarray
    stage: Stage
    metric: Metric
    anchor: str = "object"
    _rows: Mapping[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_rows", {r.id: i for i, r in enumerate(self.records)})

    def __len__(self) -> int:
        return len(self.records)

    def knn(self, query: np.ndarray, stage: Stage, m: int, exclude: str | None = None) -> list[Neighbor]:
        if not self.records:
            raise EmptyIndexError("cropped training set is empty")
        if stage != self.stage:
            raise StageUnavailableError(f"cropped training set holds {self.stage} features, not {stage}")
        exclude_row = self._rows.get(exclude) if exclude is not None else None
        rows, dists = nearest_rows(self.features, query, m, self.metric, exclude_row)
        return [Neighbor(self.records[r].id, float(d), int(r)) for r, d in zip(rows, dists)]

    def annotation(self, row: int, field_name: str) -> tuple[BoundingBox, ImageSize] | None:
        box = self.records[row].box(field_name)
        if box is None:
            return None
        crop = self.crops[row]
        return box.translate(-crop.x, -crop.y), crop.frame()


def _transfer(
    query: np.ndarray,
    frame: ImageSize,
    source: BoxSource,
    stage: Stage,
    field_name: str,
    cfg: TransferConfig,
    exclude: str | None,
) -> tuple[BoundingBox, list[Neighbor]]:
    neighbors = source.knn(query, stage, cfg.m, exclude)
    unit_boxes = []
    for n in neighbors:
        ann = source.annotation(n.row, field_name)
        if ann is not None:
            unit_boxes.append(to_unit(*ann))
    if not unit_boxes:
        raise AnnotationUnavailableError(f"none of the {len(neighbors)} retrieved neighbors has a {field_name!r} box")
    fused = fuse_boxes(unit_boxes, cfg.fusion)
    return clamp_box(from_unit(fused, frame), frame), neighbors


def transfer_step(
    query_feature: np.ndarray,
    frame: ImageSize,
    index: BoxSource,
    stage: Stage,
    box_field: str,
    cfg: TransferConfig,
    exclude: str | None = None,
) -> BoundingBox:
    """Transfer ``box_field`` boxes of the M nearest neighbors into ``frame``.

    Neighbors that lack the box are retrieved but skipped during fusion.

    Raises:
        AnnotationUnavailableError: no retrieved neighbor carries the box.
        NoOverlapError: intersection fusion found no common overlap.
    """
    box, _ = _transfer(query_feature, frame, index, stage, box_field, cfg, exclude)
    return box


# ---------------------------------------------------------------------------
# training-set crops
# ---------------------------------------------------------------------------


def _ordered_map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def rebuild_training_crops(
    index: TrainingIndex,
    provider: FeatureProvider,
    cfg: TransferConfig,
    workers: int = 1,
) -> CroppedTrainingSet:
    """Crop every training image by leave-one-out transfer from the rest.

    Each predicted crop is grown to the hull of itself and the record's
    ground-truth object box, and object-stage features are taken on the
    grown crop. A record whose transfer finds no common overlap (only
    possible with intersection fusion) falls back to its full frame.

    Raises:
        AnnotationUnavailableError: a record lacks an object box, or all of
            its neighbors do.
        StageUnavailableError: the provider cannot serve object features.
    """
    if len(index) < cfg.m + 1:
        raise EmptyIndexError(f"need at least M+1={cfg.m + 1} training records, have {len(index)}")
    full = index.features[FULL]

    def one(row: int) -> tuple[BoundingBox, BoundingBox, np.ndarray]:
        rec = index.records[row]
        if rec.object_box is None:
            raise AnnotationUnavailableError(f"training record {rec.id!r} has no object box")
        try:
            pred = transfer_step(full[row], rec.size, index, FULL, "object", cfg, exclude=rec.id)
        except NoOverlapError:
            pred = rec.size.full_box()
        crop = hull([pred, rec.object_box])
        return pred, crop, provider.provide(rec.id, crop, OBJECT)

    out = _ordered_map(one, range(len(index)), workers)
    feats = np.vstack([o[2] for o in out]).astype(np.float64)
    feats.setflags(write=False)
    return CroppedTrainingSet(
        records=index.records,
        predicted=tuple(o[0] for o in out),
        crops=tuple(o[1] for o in out),
        features=feats,
        stage=OBJECT,
        metric=index.metric,
    )


def rebuild_part_crops(
    cropped: CroppedTrainingSet,
    provider: FeatureProvider,
    part: str,
    cfg: TransferConfig,
    workers: int = 1,
) -> CroppedTrainingSet:
    """Part-level analogue of ``rebuild_training_crops``, run inside the object crops."""
    stage = Stage.for_part(part)

    def one(row: int) -> tuple[BoundingBox, BoundingBox, np.ndarray]:
        rec = cropped.records[row]
        crop = cropped.crops[row]
        gt = rec.part_boxes.get(part)
        try:
            local = transfer_step(cropped.features[row], crop.frame(), cropped, OBJECT, part, cfg, exclude=rec.id)
            pred = local.translate(crop.x, crop.y)
        except (AnnotationUnavailableError, NoOverlapError):
            pred = gt if gt is not None else crop
        grown = hull([pred, gt]) if gt is not None else pred
        return pred, grown, provider.provide(rec.id, grown, stage)

    out = _ordered_map(one, range(len(cropped)), workers)
    feats = np.vstack([o[2] for o in out]).astype(np.float64)
    feats.setflags(write=False)
    return CroppedTrainingSet(
        records=cropped.records,
        predicted=tuple(o[0] for o in out),
        crops=tuple(o[1] for o in out),
        features=feats,
        stage=stage,
        metric=cropped.metric,
        anchor=part,
    )


# ---------------------------------------------------------------------------
# localization loops
# ---------------------------------------------------------------------------


def _try_feature(provider: FeatureProvider, image_id: str, box: BoundingBox, stage: Stage) -> np.ndarray | None:
    try:
        return provider.provide(image_id, box, stage)
    except StageUnavailableError:
        return None


def iterative_localize(
    image_id: str,
    provider: FeatureProvider,
    index: TrainingIndex,
    cfg: TransferConfig,
    cropped: CroppedTrainingSet | None = None,
    raw_classifier: ClassifierModel | None = None,
    exclude: str | None = None,
) -> tuple[BoundingBox, TransferTrace]:
    """Localize the object in ``image_id`` by repeated transfer and cropping.

    Iteration 1 matches the full-image feature against ``index``; later
    iterations match the current crop's object-stage feature against
    ``cropped``. The loop stops on the first of: consecutive boxes with IoU
    of at least ``cfg.stability_iou``; ``raw_classifier``'s best score on the
    crop above ``cfg.score_threshold``; ``cfg.max_iters`` reached; no
    feature or cropped set available for the next iteration.
    """
    size = provider.image_size(image_id)
    crop = size.full_box()
    query = provider.provide(image_id, crop, FULL)
    source: BoxSource = index
    stage = FULL
    trace = TransferTrace()
    use_classifier = raw_classifier is not None and cfg.score_threshold is not None

    for t in range(1, cfg.max_iters + 1):
        local, neighbors = _transfer(query, crop.frame(), source, stage, "object", cfg, exclude)
        box = clamp_box(local.translate(crop.x, crop.y), size)
        trace.steps.append(TraceStep(box, tuple(neighbors)))

        if t > 1 and iou(box, trace.steps[-2].box) >= cfg.stability_iou:
            trace.reason = TerminationReason.STABILITY
            break
        need_next = t < cfg.max_iters and cropped is not None
        nxt = _try_feature(provider, image_id, box, OBJECT) if (need_next or use_classifier) else None
        if use_classifier and nxt is not None:
            _, scores = predict(raw_classifier, nxt)
            if max(scores.values()) > cfg.score_threshold:
                trace.reason = TerminationReason.CLASSIFIER_SCORE
                break
        if t == cfg.max_iters:
            trace.reason = TerminationReason.MAX_ITERS
            break
        # a provider that ignores the region (precomputed vectors) hands back the
        # same query again, which would only repeat the previous transfer
        if nxt is None or cropped is None or (stage == OBJECT and np.array_equal(nxt, query)):
            trace.reason = TerminationReason.STAGE_EXHAUSTED
            break
        query, crop, source, stage = nxt, box, cropped, OBJECT

    return trace.steps[-1].box, trace


def localize_parts(
    object_box: BoundingBox,
    image_id: str,
    provider: FeatureProvider,
    cropped: CroppedTrainingSet,
    part_names: Iterable[str],
    cfg: TransferConfig,
    part_sets: Mapping[str, CroppedTrainingSet] | None = None,
    exclude: str | None = None,
) -> dict[str, tuple[BoundingBox | None, TransferTrace | None]]:
    """Transfer part boxes into ``object_box`` and refine them iteratively.

    The first iteration compares the object crop against the cropped
    training objects. Later iterations, when ``part_sets`` has an entry for
    the part and the provider serves part-stage features, compare the
    current part crop against training part crops. Parts that no neighbor
    annotates come back as ``(None, None)``.
    """
    if len(cropped) == 0:
        raise EmptyIndexError("cropped training set is empty")
    size = provider.image_size(image_id)
    obj = clamp_box(object_box, size)
    obj_feature = provider.provide(image_id, obj, OBJECT)
    part_sets = part_sets or {}
    results: dict[str, tuple[BoundingBox | None, TransferTrace | None]] = {}

    for name in part_names:
        part_stage = Stage.for_part(name)
        crop, query = obj, obj_feature
        source: CroppedTrainingSet = cropped
        stage = OBJECT
        trace = TransferTrace()
        for t in range(1, cfg.max_iters + 1):
            try:
                local, neighbors = _transfer(query, crop.frame(), source, stage, name, cfg, exclude)
            except AnnotationUnavailableError:
                if t == 1:
                    break
                trace.reason = TerminationReason.STAGE_EXHAUSTED
                break
            box = clip_to(local.translate(crop.x, crop.y), obj)
            trace.steps.append(TraceStep(box, tuple(neighbors)))
            if t > 1 and iou(box, trace.steps[-2].box) >= cfg.stability_iou:
                trace.reason = TerminationReason.STABILITY
                break
            if t == cfg.max_iters:
                trace.reason = TerminationReason.MAX_ITERS
                break
            next_set = part_sets.get(name)
            nxt = _try_feature(provider, image_id, box, part_stage) if next_set is not None else None
            if nxt is None:
                trace.reason = TerminationReason.STAGE_EXHAUSTED
                break
            query, crop, source, stage = nxt, box, next_set, part_stage
        results[name] = (trace.steps[-1].box, trace) if trace.steps else (None, None)
    return results


class Localizer:
    """Holds the shared state of a localization run and builds cropped sets on first use.

    A cropped set that cannot be built because the provider lacks the needed
    stage is recorded as unavailable, which caps iteration at that level.
    """

    def __init__(
        self,
        index: TrainingIndex,
        provider: FeatureProvider,
        cfg: TransferConfig,
        raw_classifier: ClassifierModel | None = None,
        workers: int = 1,
    ):
        self.index = index
        self.provider = provider
        self.cfg = cfg
        self.raw_classifier = raw_classifier
        self.workers = workers
        self._lock = threading.RLock()
        self._cropped: CroppedTrainingSet | None = None
        self._cropped_done = False
        self._part_sets: dict[str, CroppedTrainingSet | None] = {}

    @property
    def cropped(self) -> CroppedTrainingSet | None:
        with self._lock:
            if not self._cropped_done:
                try:
                    self._cropped = rebuild_training_crops(self.index, self.provider, self.cfg, self.workers)
                except StageUnavailableError:
                    self._cropped = None
                self._cropped_done = True
            return self._cropped

    def part_set(self, part: str) -> CroppedTrainingSet | None:
        with self._lock:
            if part not in self._part_sets:
                base = self.cropped
                result = None
                if base is not None and self.cfg.max_iters > 1:
                    try:
                        result = rebuild_part_crops(base, self.provider, part, self.cfg, self.workers)
                    except StageUnavailableError:
                        result = None
                self._part_sets[part] = result
            return self._part_sets[part]

    def localize(self, image_id: str, exclude: str | None = None) -> tuple[BoundingBox, TransferTrace]:
        cropped = self.cropped if self.cfg.max_iters > 1 else None
        return iterative_localize(
            image_id, self.provider, self.index, self.cfg, cropped, self.raw_classifier, exclude=exclude
        )

    def parts(
        self, object_box: BoundingBox, image_id: str, part_names: Sequence[str], exclude: str | None = None
    ) -> dict[str, tuple[BoundingBox | None, TransferTrace | None]]:
        cropped = self.cropped
        if cropped is None:
            raise StageUnavailableError("part localization needs object-stage features for the training set")
        sets = {}
        for name in part_names:
            s = self.part_set(name)
            if s is not None:
                sets[name] = s
        return localize_parts(object_box, image_id, self.provider, cropped, part_names, self.cfg, sets, exclude)
