"""
Dataset manifests and exact nearest-neighbor retrieval.

A manifest is JSON Lines, one image per line::

    {"id": "0001", "width": 500, "height": 375, "class": "cardinal",
     "object_box": [60, 40, 300, 280],
     "parts": {"head": [200, 50, 60, 60], "body": null},
     "features": {"full": {"file": "full.fvec", "row": 0}, "object": [0.1, 0.2]},
     "image": "images/0001.pgm"}

Only ``id``, ``width`` and ``height`` are required. Relative paths resolve
against the manifest's directory. ``image`` is optional and, when present,
points at a binary PGM raster that the descriptor provider can crop.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .errors import (
    DimensionError,
    DuplicateIdError,
    EmptyIndexError,
    ManifestError,
    StageUnavailableError,
    UnknownImageError,
)
from .features import (
    FULL,
    CompositeProvider,
    FeatureProvider,
    Metric,
    PrecomputedProvider,
    RasterProvider,
    Stage,
    distances,
    read_fvec,
)
from .geometry import BoundingBox, ImageSize

BOX_TOLERANCE = 1e-6


@dataclass(frozen=True)
class FeatureRef:
    """Row ``row`` of the FVEC file at ``file``."""

    file: Path
    row: int


@dataclass(frozen=True, eq=False)
class AnnotatedImage:
    id: str
    size: ImageSize
    class_label: str | None = None
    object_box: BoundingBox | None = None
    part_boxes: Mapping[str, BoundingBox | None] = field(default_factory=dict)
    feature_refs: Mapping[Stage, FeatureRef | np.ndarray] = field(default_factory=dict)
    image_path: Path | None = None

    def box(self, field_name: str) -> BoundingBox | None:
        """``"object"`` or a part name."""
        if field_name == "object":
            return self.object_box
        return self.part_boxes.get(field_name)

    def to_json(self, base_dir: Path | None = None) -> dict[str, Any]:
        """Inverse of the manifest parser; paths are written relative to ``base_dir``."""

        def rel(p: Path) -> str:
            if base_dir is None:
                return str(p)
            return os.path.relpath(p, base_dir)

        out: dict[str, Any] = {"id": self.id, "width": self.size.width, "height": self.size.height}
        if self.class_label is not None:
            out["class"] = self.class_label
        if self.object_box is not None:
            out["object_box"] = self.object_box.as_list()
        if self.part_boxes:
            out["parts"] = {k: (v.as_list() if v is not None else None) for k, v in self.part_boxes.items()}
        if self.feature_refs:
            feats: dict[str, Any] = {}
            for stage, ref in self.feature_refs.items():
                if isinstance(ref, FeatureRef):
                    feats[str(stage)] = {"file": rel(ref.file), "row": ref.row}
                else:
                    feats[str(stage)] = [float(v) for v in ref]
            out["features"] = feats
        if self.image_path is not None:
            out["image"] = rel(self.image_path)
        return out


def _check_box(box: BoundingBox, size: ImageSize, what: str) -> None:
    if not box.is_proper:
        raise ValueError(f"{what} {box.as_list()} has non-positive width or height")
    if (
        box.x < -BOX_TOLERANCE
        or box.y < -BOX_TOLERANCE
        or box.x2 > size.width + BOX_TOLERANCE
        or box.y2 > size.height + BOX_TOLERANCE
    ):
        raise ValueError(f"{what} {box.as_list()} exceeds image size {size.width:g}x{size.height:g}")


def validate_record(rec: AnnotatedImage) -> None:
    if rec.object_box is not None:
        _check_box(rec.object_box, rec.size, f"record {rec.id!r}: object_box")
    for name, box in rec.part_boxes.items():
        if box is not None:
            _check_box(box, rec.size, f"record {rec.id!r}: part {name!r}")


def _parse_box(value: Any, what: str) -> BoundingBox:
    if not isinstance(value, list) or len(value) != 4 or not all(isinstance(v, (int, float)) for v in value):
        raise ValueError(f"{what} must be a list of 4 numbers")
    return BoundingBox.from_list(value)


def parse_record(obj: Any, base_dir: Path) -> AnnotatedImage:
    if not isinstance(obj, dict):
        raise ValueError("record must be a JSON object")
    unknown = set(obj) - {"id", "width", "height", "class", "object_box", "parts", "features", "image"}
    if unknown:
        raise ValueError(f"unknown fields {sorted(unknown)}")
    if "id" not in obj:
        raise ValueError("record has no 'id'")
    rid = str(obj["id"])
    try:
        size = ImageSize(obj["width"], obj["height"])
    except KeyError as exc:
        raise ValueError(f"record {rid!r} is missing {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ValueError(f"record {rid!r}: {exc}") from None

    label = obj.get("class")
    obj_box = _parse_box(obj["object_box"], f"record {rid!r}: object_box") if obj.get("object_box") is not None else None

    parts: dict[str, BoundingBox | None] = {}
    for name, val in (obj.get("parts") or {}).items():
        parts[str(name)] = None if val is None else _parse_box(val, f"record {rid!r}: part {name!r}")

    refs: dict[Stage, FeatureRef | np.ndarray] = {}
    for stage_name, val in (obj.get("features") or {}).items():
        stage = Stage.parse(stage_name)
        if isinstance(val, list):
            refs[stage] = np.asarray(val, dtype=np.float64)
        elif isinstance(val, dict) and "file" in val:
            refs[stage] = FeatureRef(base_dir / val["file"], int(val.get("row", 0)))
        else:
            raise ValueError(f"record {rid!r}: feature {stage_name!r} must be an inline array or {{file, row}}")

    image = base_dir / obj["image"] if obj.get("image") else None
    rec = AnnotatedImage(
        id=rid,
        size=size,
        class_label=None if label is None else str(label),
        object_box=obj_box,
        part_boxes=parts,
        feature_refs=refs,
        image_path=image,
    )
    validate_record(rec)
    return rec


def load_manifest(path: str | os.PathLike) -> list[AnnotatedImage]:
    """Parse and validate a manifest; errors carry the file and line number."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ManifestError("manifest not found", path=str(path)) from None
    records: list[AnnotatedImage] = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON: {exc.msg}", path=str(path), line=lineno) from None
        try:
            rec = parse_record(obj, path.parent)
        except ValueError as exc:
            raise ManifestError(str(exc), path=str(path), line=lineno) from None
        if rec.id in seen:
            raise DuplicateIdError(f"{path}:{lineno}: duplicate id {rec.id!r} (first seen on line {seen[rec.id]})")
        seen[rec.id] = lineno
        records.append(rec)
    return records


def write_manifest(path: str | os.PathLike, records: Iterable[AnnotatedImage]) -> None:
    path = Path(path)
    base = path.parent
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(base), sort_keys=True) + "\n")


def provider_from_records(records: Sequence[AnnotatedImage]) -> CompositeProvider:
    """Provider backed by each record's raster, or by its stored stage features.

    Raises:
        ManifestError: a referenced feature file is missing or too short.
    """
    files: dict[Path, np.ndarray] = {}
    vectors: dict[tuple[str, Stage], np.ndarray] = {}
    rasters: dict[str, Path] = {}
    sizes = {r.id: r.size for r in records}
    for rec in records:
        if rec.image_path is not None:
            if not rec.image_path.exists():
                raise ManifestError(f"record {rec.id!r}: image file not found: {rec.image_path}")
            rasters[rec.id] = rec.image_path
        for stage, ref in rec.feature_refs.items():
            if isinstance(ref, FeatureRef):
                if ref.file not in files:
                    if not ref.file.exists():
                        raise ManifestError(f"record {rec.id!r}: feature file not found: {ref.file}")
                    files[ref.file] = read_fvec(ref.file)
                data = files[ref.file]
                if not 0 <= ref.row < data.shape[0]:
                    raise ManifestError(f"record {rec.id!r}: row {ref.row} out of range for {ref.file} ({data.shape[0]} rows)")
                vectors[(rec.id, stage)] = data[ref.row]
            else:
                vectors[(rec.id, stage)] = ref
    try:
        pre = PrecomputedProvider(sizes, vectors)
    except DimensionError as exc:
        raise ManifestError(str(exc)) from None
    return CompositeProvider(
        raster=RasterProvider(rasters) if rasters else None,
        precomputed=pre,
        sizes=sizes,
    )


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


class Neighbor(NamedTuple):
    id: str
    distance: float
    row: int


def nearest_rows(
    matrix: np.ndarray,
    query: np.ndarray,
    m: int,
    metric: Metric | str = Metric.COSINE,
    exclude_row: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Rows of the ``m`` nearest vectors, ascending; ties go to the lower row."""
    if m < 1:
        raise ValueError(f"M must be >= 1, got {m}")
    d = distances(matrix, query, metric)
    order = np.argsort(d, kind="stable")
    if exclude_row is not None:
        order = order[order != exclude_row]
    order = order[:m]
    return order, d[order]


@dataclass(frozen=True, eq=False)
class TrainingIndex:
    """Immutable training set with one feature matrix per stored stage."""

    records: tuple[AnnotatedImage, ...]
    features: Mapping[Stage, np.ndarray]
    metric: Metric = Metric.COSINE
    _rows: Mapping[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_rows", {r.id: i for i, r in enumerate(self.records)})

    def __len__(self) -> int:
        return len(self.records)

    def row_of(self, image_id: str) -> int:
        try:
            return self._rows[image_id]
        except KeyError:
            raise UnknownImageError(f"image {image_id!r} is not in the index") from None

    def record(self, image_id: str) -> AnnotatedImage:
        return self.records[self.row_of(image_id)]

    @property
    def dim(self) -> int:
        return self.features[FULL].shape[1]

    def part_names(self) -> list[str]:
        names: dict[str, None] = {}
        for r in self.records:
            for k in r.part_boxes:
                names.setdefault(k, None)
        return list(names)

    def annotation(self, row: int, field_name: str) -> tuple[BoundingBox, ImageSize] | None:
        rec = self.records[row]
        box = rec.box(field_name)
        return None if box is None else (box, rec.size)

    def knn(self, query: np.ndarray, stage: Stage = FULL, m: int = 2, exclude: str | None = None) -> list[Neighbor]:
        if not self.records:
            raise EmptyIndexError("index is empty")
        try:
            matrix = self.features[stage]
        except KeyError:
            raise StageUnavailableError(f"index holds no {stage} features") from None
        exclude_row = self._rows.get(exclude) if exclude is not None else None
        rows, dists = nearest_rows(matrix, query, m, self.metric, exclude_row)
        return [Neighbor(self.records[r].id, float(dv), int(r)) for r, dv in zip(rows, dists)]


def build_index(
    records: Sequence[AnnotatedImage],
    provider: FeatureProvider,
    metric: Metric | str = Metric.COSINE,
    stages: Sequence[Stage] = (FULL,),
) -> TrainingIndex:
    """Validate records and gather one feature row per record for each stage."""
    if not records:
        raise EmptyIndexError("manifest has no records")
    seen: set[str] = set()
    for rec in records:
        if rec.id in seen:
            raise DuplicateIdError(f"duplicate id {rec.id!r}")
        seen.add(rec.id)
        validate_record(rec)
    metric = Metric.parse(metric)
    mats: dict[Stage, np.ndarray] = {}
    for stage in stages:
        rows = []
        for rec in records:
            box = rec.size.full_box() if stage == FULL else rec.box("object" if stage.kind == "object" else stage.part)
            if box is None:
                raise StageUnavailableError(f"record {rec.id!r} has no box for stage {stage}")
            rows.append(provider.provide(rec.id, box, stage))
        if len({r.shape for r in rows}) != 1:
            raise DimensionError(f"stage {stage} features have mixed shapes {sorted({r.shape for r in rows})}")
        mat = np.vstack(rows).astype(np.float64)
        mat.setflags(write=False)
        mats[stage] = mat
    return TrainingIndex(tuple(records), mats, metric)
