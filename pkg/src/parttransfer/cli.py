"""
Command-line entry point.

Every subcommand reads its inputs, writes its outputs under ``--output-dir``
and drops an ``effective_config_<command>.json`` next to them. Settings come
from three layers, later ones winning: built-in defaults, the JSON file given
by ``--config``, explicit flags. A config file may hold flat keys, which
apply to any command that knows them, and per-command sections such as
``{"localize": {"m": 3}}``.

Exit codes: 0 success, 1 invalid input or pipeline error, 2 usage error,
3 evaluation sanity check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, TransferError, UnknownImageError
from .evaluation import (
    DEFAULT_THRESHOLDS,
    accuracy,
    pcp,
    render_accuracy_table,
    render_pcp_table,
    sanity_failures,
)
from .features import FULL, OBJECT, CompositeProvider, Stage
from .geometry import BoundingBox, ImageSize
from .index import AnnotatedImage, TrainingIndex, build_index, load_manifest, provider_from_records
from .pipeline import (
    Localization,
    localize_records,
    refine_localization,
    region_feature,
    regression_pairs,
)
from .recognition import DEFAULT_REGIONS, ClassifierModel, RegionLayout, concat_regions, predict, train_svm
from .regression import ALL_CLASSES, RegressionPair, RegressorModel, fit_regressor
from .synthetic import SynthConfig, generate
from .transfer import Localizer, TransferConfig

log = logging.getLogger("parttransfer")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_SANITY = 0, 1, 2, 3

GLOBAL_DEFAULTS: dict[str, Any] = {"threads": 1, "seed": 0, "output_dir": ".", "format": "text"}

_TRANSFER_DEFAULTS: dict[str, Any] = {
    "train": None,
    "m": 2,
    "fusion": "union",
    "max_iters": 3,
    "stability_iou": 0.9,
    "score_threshold": None,
    "metric": "cosine",
}

COMMAND_DEFAULTS: dict[str, dict[str, Any]] = {
    "build-index": {"train": None, "metric": "cosine"},
    "localize": {
        **_TRANSFER_DEFAULTS,
        "test": None,
        "parts": False,
        "part_names": None,
        "seed_oracle_object": False,
        "only": None,
        "fail_fast": False,
        "exclude_self": False,
        "raw_classifier": None,
    },
    "train-regressor": {
        **_TRANSFER_DEFAULTS,
        "localizations": None,
        "lam": 1.0,
        "convention": "size",
        "intercept": False,
        "apply_to_parts": False,
        "class_specific": True,
        "pooled": True,
    },
    "refine": {
        "test": None,
        "localizations": None,
        "models": None,
        "apply_to_parts": False,
        "fallback": False,
        "class_source": None,
        "classifier": None,
    },
    "train-classifier": {
        "train": None,
        "regions": ",".join(DEFAULT_REGIONS),
        "C": 1.0,
        "epochs": 50,
        "localizations": None,
    },
    "recognize": {"test": None, "classifier": None, "localizations": None, "top_k": 3},
    "evaluate": {
        "truth": None,
        "run": [],
        "recognition": [],
        "thresholds": ",".join(f"{t:g}" for t in DEFAULT_THRESHOLDS),
        "part_names": None,
        "strict": False,
        "absent_as_miss": False,
    },
    "synth-gen": {
        "n_train": 500,
        "n_test": 200,
        "n_clusters": 8,
        "n_classes": 4,
        "vector": False,
        "image_size": 96,
        "size_jitter": 0.2,
        "box_jitter": 0.05,
        "feature_noise": 0.1,
        "clutter": 2,
        "stripe_contrast": 0.12,
    },
}

# keys naming files that must exist before a command runs
INPUT_PATH_KEYS = ("train", "test", "truth", "localizations", "models", "classifier", "raw_classifier")
LABELLED_PATH_KEYS = ("run", "recognition")

_ALL_KEYS = set(GLOBAL_DEFAULTS).union(*COMMAND_DEFAULTS.values())


@dataclass
class RunConfig:
    """The resolved settings of one command invocation."""

    command: str
    values: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def resolve(
        cls, command: str, file_values: Mapping[str, Any] | None, cli_values: Mapping[str, Any]
    ) -> "RunConfig":
        known = {**GLOBAL_DEFAULTS, **COMMAND_DEFAULTS[command]}
        merged = dict(known)
        file_values = dict(file_values or {})
        section = file_values.pop(command, None) or {}
        for name in COMMAND_DEFAULTS:
            file_values.pop(name, None)
        for layer in (file_values, section):
            unknown = set(layer) - _ALL_KEYS
            if unknown:
                raise ConfigError(f"unknown config keys {sorted(unknown)}")
            merged.update({k: v for k, v in layer.items() if k in known})
        merged.update({k: v for k, v in cli_values.items() if k in known})
        return cls(command, merged)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(key, default)

    def to_json(self) -> dict[str, Any]:
        return {"command": self.command, "values": dict(sorted(self.values.items()))}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "RunConfig":
        return cls(str(data["command"]), dict(data["values"]))

    def validate(self) -> None:
        """Check that every referenced input path exists."""
        for key in INPUT_PATH_KEYS:
            value = self.values.get(key)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"--{key.replace('_', '-')}: no such file or directory: {value}")
        for key in LABELLED_PATH_KEYS:
            for item in self.values.get(key) or []:
                _, path = _split_labelled(item)
                if not Path(path).exists():
                    raise ConfigError(f"--{key}: no such file: {path}")

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if self.values.get(k) in (None, [], "")]
        if missing:
            raise ConfigError("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    def transfer_config(self) -> TransferConfig:
        return TransferConfig(
            m=int(self["m"]),
            fusion=self["fusion"],
            max_iters=int(self["max_iters"]),
            stability_iou=float(self["stability_iou"]),
            score_threshold=None if self["score_threshold"] is None else float(self["score_threshold"]),
            metric=self["metric"],
        )


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _split_labelled(item: str) -> tuple[str, str]:
    if "=" in item:
        label, path = item.split("=", 1)
        return label, path
    return Path(item).stem, item


def _csv(value: str | Sequence[str] | None) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return [str(v) for v in value]


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True)


def _write_jsonl(path: Path, rows: Sequence[Mapping[str, Any]]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(_dump(row) + "\n")


def _read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
    return rows


def _read_localizations(path: str | Path) -> dict[str, Localization]:
    out = {}
    for row in _read_jsonl(path):
        if row.get("error"):
            continue
        loc = Localization.from_json(row)
        out[loc.id] = loc
    return out


def _load_records(path: str | Path) -> list[AnnotatedImage]:
    return load_manifest(path)


def _provider(*groups: Sequence[AnnotatedImage]) -> CompositeProvider:
    seen: dict[str, int] = {}
    records = []
    for gi, group in enumerate(groups):
        for rec in group:
            if rec.id in seen and seen[rec.id] != gi:
                raise ConfigError(f"image id {rec.id!r} appears in more than one manifest")
            if rec.id not in seen:
                seen[rec.id] = gi
                records.append(rec)
    return provider_from_records(records)


def _part_names(records: Sequence[AnnotatedImage]) -> list[str]:
    names: dict[str, None] = {}
    for rec in records:
        for name in rec.part_boxes:
            names.setdefault(name, None)
    return sorted(names)


def _index(records: Sequence[AnnotatedImage], provider: CompositeProvider, metric: str) -> TrainingIndex:
    return build_index(records, provider, metric)


def _emit(cfg: RunConfig, text: str, structured: Mapping[str, Any]) -> None:
    if cfg["format"] == "structured":
        print(_dump(structured))
    else:
        print(text.rstrip("\n"))


def _region_boxes(rec: AnnotatedImage, loc: Localization | None) -> dict[str, BoundingBox | None]:
    if loc is not None:
        return loc.boxes()
    return {"object": rec.object_box, **dict(rec.part_boxes)}


def _concat_features(
    provider: CompositeProvider, image_id: str, boxes: Mapping[str, BoundingBox | None], layout: RegionLayout
) -> np.ndarray:
    feats = {name: region_feature(provider, image_id, name, boxes.get(name)) for name in layout.names}
    return concat_regions(feats, layout)


def _localize_all(
    cfg: RunConfig,
    index: TrainingIndex,
    provider: CompositeProvider,
    records: Sequence[AnnotatedImage],
    part_names: Sequence[str],
    exclude_self: bool,
    oracle_object: bool = False,
    raw_classifier: ClassifierModel | None = None,
    fail_fast: bool = False,
) -> list[Localization]:
    localizer = Localizer(index, provider, cfg.transfer_config(), raw_classifier, workers=int(cfg["threads"]))
    return localize_records(
        localizer,
        records,
        part_names,
        oracle_object=oracle_object,
        exclude_self=exclude_self,
        workers=int(cfg["threads"]),
        fail_fast=fail_fast,
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_build_index(cfg: RunConfig) -> int:
    cfg.require("train")
    records = _load_records(cfg["train"])
    provider = _provider(records)
    index = _index(records, provider, cfg["metric"])
    stages = [str(FULL)]
    if all(_has_stage(provider, r, OBJECT) for r in records):
        stages.append(str(OBJECT))
    missing_obj = [r.id for r in records if r.object_box is None]
    classes: dict[str, int] = {}
    for r in records:
        if r.class_label is not None:
            classes[r.class_label] = classes.get(r.class_label, 0) + 1
    summary = {
        "manifest": str(cfg["train"]),
        "records": len(index),
        "dim": index.dim,
        "metric": index.metric.value,
        "stages": stages,
        "parts": index.part_names(),
        "classes": dict(sorted(classes.items())),
        "missing_object_box": len(missing_obj),
    }
    (cfg.output_dir / "index_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if missing_obj:
        log.warning("%d training records have no object box and will not be transferred from", len(missing_obj))
    text = (
        f"indexed {len(index)} records (dim {index.dim}, stages: {', '.join(stages)})\n"
        f"classes: {len(classes)}  parts: {', '.join(index.part_names()) or '-'}"
    )
    _emit(cfg, text, summary)
    return EXIT_OK


def _has_stage(provider: CompositeProvider, rec: AnnotatedImage, stage: Stage) -> bool:
    if provider.raster is not None and rec.id in provider.raster:
        return True
    return provider.precomputed is not None and provider.precomputed.has(rec.id, stage)


def cmd_localize(cfg: RunConfig) -> int:
    cfg.require("train", "test")
    train = _load_records(cfg["train"])
    test = _load_records(cfg["test"])
    only = _csv(cfg["only"])
    if only:
        by_id = {r.id: r for r in test}
        unknown = [i for i in only if i not in by_id]
        if unknown:
            raise UnknownImageError(f"--only names ids missing from {cfg['test']}: {', '.join(unknown)}")
        test = [by_id[i] for i in only]
    provider = _provider(train, test)
    index = _index(train, provider, cfg["metric"])
    parts: list[str] = []
    if cfg["parts"] or cfg["part_names"]:
        parts = _csv(cfg["part_names"]) or index.part_names()
    raw = ClassifierModel.load(cfg["raw_classifier"]) if cfg["raw_classifier"] else None

    results = _localize_all(
        cfg,
        index,
        provider,
        test,
        parts,
        exclude_self=bool(cfg["exclude_self"]),
        oracle_object=bool(cfg["seed_oracle_object"]),
        raw_classifier=raw,
        fail_fast=bool(cfg["fail_fast"]),
    )
    ok = [r for r in results if r.error is None]
    errors = [{"id": r.id, "error": r.error} for r in results if r.error is not None]
    out = cfg.output_dir
    _write_jsonl(out / "localizations.jsonl", [r.to_json() for r in ok])
    _write_jsonl(out / "traces.jsonl", [r.trace_json() for r in ok])
    _write_jsonl(out / "localize_errors.jsonl", errors)

    reasons: dict[str, int] = {}
    for r in ok:
        if r.reason is not None:
            reasons[r.reason.value] = reasons.get(r.reason.value, 0) + 1
    summary = {
        "localized": len(ok),
        "failed": len(errors),
        "parts": parts,
        "termination": dict(sorted(reasons.items())),
        "transfer": cfg.transfer_config().to_dict(),
    }
    text = f"localized {len(ok)} of {len(results)} images"
    if parts:
        text += f" with parts {', '.join(parts)}"
    if reasons:
        text += "\ntermination: " + ", ".join(f"{k}={v}" for k, v in sorted(reasons.items()))
    if errors:
        text += f"\n{len(errors)} failures written to localize_errors.jsonl"
    _emit(cfg, text, summary)
    return EXIT_OK


def _fit_field(
    pairs: Sequence[RegressionPair], cfg: RunConfig
) -> RegressorModel:
    model = fit_regressor(pairs, float(cfg["lam"]), cfg["convention"], bool(cfg["intercept"]))
    if cfg["class_specific"] and cfg["pooled"] and ALL_CLASSES not in model.weights:
        pooled = fit_regressor(
            [RegressionPair(p.predicted, p.truth, p.feature, ALL_CLASSES) for p in pairs],
            float(cfg["lam"]),
            cfg["convention"],
            bool(cfg["intercept"]),
        )
        model = RegressorModel(
            {**model.weights, ALL_CLASSES: pooled.weights[ALL_CLASSES]},
            model.lam,
            model.dim,
            model.convention,
            model.intercept,
        )
    return model


def cmd_train_regressor(cfg: RunConfig) -> int:
    cfg.require("train")
    train = _load_records(cfg["train"])
    provider = _provider(train)
    fields = ["object"]
    if cfg["apply_to_parts"]:
        fields += _part_names(train)
    if cfg["localizations"]:
        locs = _read_localizations(cfg["localizations"])
    else:
        index = _index(train, provider, cfg["metric"])
        results = _localize_all(cfg, index, provider, train, fields[1:], exclude_self=True)
        locs = {r.id: r for r in results if r.error is None}
    predictions = {rid: loc.boxes() for rid, loc in locs.items()}

    report = {}
    for name in fields:
        pairs = regression_pairs(provider, train, predictions, name, class_specific=bool(cfg["class_specific"]))
        if not pairs:
            log.warning("no regression pairs for %r (missing predictions or %s-stage features); skipped", name, name)
            continue
        model = _fit_field(pairs, cfg)
        model.meta.update({"field": name, "pairs": len(pairs)})
        model.save(cfg.output_dir / f"regressor_{name}.model")
        report[name] = {"pairs": len(pairs), "classes": model.classes, "dim": model.dim}
    if not report:
        raise ConfigError("no regressor could be trained: no usable (prediction, ground truth, feature) triples")
    text = "\n".join(f"regressor_{k}.model: {v['pairs']} pairs, {len(v['classes'])} class models" for k, v in report.items())
    _emit(cfg, text, {"models": report})
    return EXIT_OK


def _class_source(cfg: RunConfig) -> str:
    source = cfg["class_source"] or ("classifier" if cfg["classifier"] else "pooled")
    if source not in ("pooled", "truth", "classifier"):
        raise ConfigError(f"--class-source must be pooled, truth or classifier, got {source!r}")
    if source == "classifier" and not cfg["classifier"]:
        raise ConfigError("--class-source classifier needs --classifier")
    return source


def cmd_refine(cfg: RunConfig) -> int:
    cfg.require("test", "localizations", "models")
    test = _load_records(cfg["test"])
    by_id = {r.id: r for r in test}
    provider = _provider(test)
    locs = _read_localizations(cfg["localizations"])
    unknown = sorted(set(locs) - set(by_id))
    if unknown:
        raise UnknownImageError(f"{cfg['localizations']}: ids not in {cfg['test']}: {', '.join(unknown[:5])}")
    model_dir = Path(cfg["models"])
    models: dict[str, RegressorModel] = {}
    fields = ["object"]
    if cfg["apply_to_parts"]:
        fields += sorted({p for loc in locs.values() for p in loc.parts})
    for name in fields:
        path = model_dir / f"regressor_{name}.model"
        if path.exists():
            models[name] = RegressorModel.load(path)
        elif name == "object":
            raise ConfigError(f"missing object regressor: {path}")
        else:
            log.warning("no regressor for part %r; its boxes pass through unchanged", name)
    source = _class_source(cfg)
    classifier = ClassifierModel.load(cfg["classifier"]) if source == "classifier" else None

    refined, errors = [], []
    for rec in test:
        loc = locs.get(rec.id)
        if loc is None:
            continue
        try:
            if source == "truth":
                label = rec.class_label or ALL_CLASSES
            elif source == "classifier":
                layout = classifier.layout or RegionLayout.uniform(["object"], classifier.dim)
                label, _ = predict(classifier, _concat_features(provider, rec.id, loc.boxes(), layout))
            else:
                label = ALL_CLASSES
            out = Localization(loc.id, loc.object_box, dict(loc.parts), loc.reason, loc.iterations)
            for name, model in models.items():
                box = refine_localization(model, provider, loc, label, name, fallback=bool(cfg["fallback"]))
                if name == "object":
                    out.object_box = box
                else:
                    out.parts[name] = box
            refined.append(out.to_json())
        except TransferError as exc:
            errors.append({"id": rec.id, "error": f"{type(exc).__name__}: {exc}"})
    _write_jsonl(cfg.output_dir / "refined.jsonl", refined)
    _write_jsonl(cfg.output_dir / "refine_errors.jsonl", errors)
    text = f"refined {len(refined)} localizations ({', '.join(models)}; class source: {source})"
    if errors:
        text += f"\n{len(errors)} failures written to refine_errors.jsonl"
    _emit(cfg, text, {"refined": len(refined), "failed": len(errors), "fields": list(models), "class_source": source})
    return EXIT_OK


def _layout_for(provider: CompositeProvider, records: Sequence[AnnotatedImage], regions: Sequence[str], boxes) -> RegionLayout:
    dims = []
    fallback = provider.dim
    for name in regions:
        dim = None
        for rec in records:
            vec = region_feature(provider, rec.id, name, boxes(rec).get(name))
            if vec is not None:
                dim = vec.shape[0]
                break
        if dim is None:
            log.warning("region %r has no features in the training set; it is zero-filled", name)
            dim = fallback
        dims.append((name, int(dim)))
    return RegionLayout(tuple(dims))


def cmd_train_classifier(cfg: RunConfig) -> int:
    cfg.require("train")
    train = _load_records(cfg["train"])
    provider = _provider(train)
    regions = _csv(cfg["regions"])
    if not regions:
        raise ConfigError("--regions must name at least one region")
    locs = _read_localizations(cfg["localizations"]) if cfg["localizations"] else {}

    def boxes(rec: AnnotatedImage) -> dict[str, BoundingBox | None]:
        return _region_boxes(rec, locs.get(rec.id) if locs else None)

    labelled = [r for r in train if r.class_label is not None]
    layout = _layout_for(provider, labelled, regions, boxes)
    examples = [(_concat_features(provider, r.id, boxes(r), layout), r.class_label) for r in labelled]
    model = train_svm(examples, C=float(cfg["C"]), epochs=int(cfg["epochs"]), seed=int(cfg["seed"]), layout=layout)
    model.save(cfg.output_dir / "classifier.model")
    train_acc = 100.0 * np.mean([predict(model, x)[0] == y for x, y in examples])
    summary = {
        "examples": len(examples),
        "classes": list(model.classes),
        "layout": layout.to_json(),
        "train_accuracy": float(train_acc),
    }
    text = (
        f"trained {len(model.classes)}-class classifier on {len(examples)} examples "
        f"(regions: {', '.join(layout.names)}; dim {model.dim})\ntraining accuracy {train_acc:.1f}%"
    )
    _emit(cfg, text, summary)
    return EXIT_OK


def cmd_recognize(cfg: RunConfig) -> int:
    cfg.require("test", "classifier")
    test = _load_records(cfg["test"])
    provider = _provider(test)
    model = ClassifierModel.load(cfg["classifier"])
    layout = model.layout or RegionLayout.uniform(["full"], model.dim)
    locs = _read_localizations(cfg["localizations"]) if cfg["localizations"] else None
    top_k = max(1, int(cfg["top_k"]))

    rows, errors = [], []
    for rec in test:
        if locs is not None and rec.id not in locs:
            errors.append({"id": rec.id, "error": "no localization"})
            continue
        try:
            x = _concat_features(provider, rec.id, _region_boxes(rec, locs.get(rec.id) if locs else None), layout)
            label, scores = predict(model, x)
        except TransferError as exc:
            errors.append({"id": rec.id, "error": f"{type(exc).__name__}: {exc}"})
            continue
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], model.classes.index(kv[0])))[:top_k]
        rows.append({"id": rec.id, "class": label, "scores": [[c, s] for c, s in ranked]})
    _write_jsonl(cfg.output_dir / "recognition.jsonl", rows)
    _write_jsonl(cfg.output_dir / "recognize_errors.jsonl", errors)
    summary: dict[str, Any] = {"predicted": len(rows), "failed": len(errors), "boxes": "localized" if locs is not None else "ground truth"}
    text = f"classified {len(rows)} images using {summary['boxes']} boxes"
    if rows and all(r.class_label is not None for r in test if r.id in {row['id'] for row in rows}):
        acc = accuracy({row["id"]: row["class"] for row in rows}, test)
        summary["accuracy"] = acc
        text += f"\naccuracy {acc:.1f}%"
    _emit(cfg, text, summary)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    cfg.require("truth")
    if not cfg["run"] and not cfg["recognition"]:
        raise ConfigError("evaluate needs at least one --run or --recognition input")
    truth = _load_records(cfg["truth"])
    thresholds = [float(t) for t in _csv(cfg["thresholds"])]
    wanted = _csv(cfg["part_names"]) or None

    reports = {}
    problems: list[str] = []
    for item in cfg["run"]:
        label, path = _split_labelled(item)
        locs = _read_localizations(path)
        preds = {rid: loc.boxes() for rid, loc in locs.items()}
        parts = wanted or ["object"] + sorted({p for loc in locs.values() for p in loc.parts})
        rep = pcp(preds, truth, thresholds, parts, strict=bool(cfg["strict"]), absent_as_miss=bool(cfg["absent_as_miss"]))
        reports[label] = rep
        problems += [f"{label}: {p}" for p in sanity_failures(rep, truth)]

    accs = {}
    for item in cfg["recognition"]:
        label, path = _split_labelled(item)
        accs[label] = accuracy({row["id"]: row["class"] for row in _read_jsonl(path)}, truth)

    text_parts = []
    if reports:
        text_parts.append(render_pcp_table(reports, "Localization PCP (%)"))
        if len(thresholds) > 1:
            lead = thresholds[0]
            op = ">" if cfg["strict"] else ">="
            text_parts.append(_single_threshold_table(reports, lead, f"PCP at {op}{lead:g} by part (%)"))
    if accs:
        text_parts.append(render_accuracy_table(accs, "Recognition accuracy"))
    if problems:
        text_parts.append("SANITY CHECK FAILED\n" + "\n".join(problems) + "\n")
    text = "\n".join(text_parts)
    structured = {
        "localization": {k: v.to_json() for k, v in reports.items()},
        "recognition": accs,
        "sanity_failures": problems,
    }
    out = cfg.output_dir
    if cfg["format"] == "structured":
        (out / "report.json").write_text(json.dumps(structured, indent=2, sort_keys=True) + "\n")
    else:
        (out / "report.txt").write_text(text)
    _emit(cfg, text, structured)
    return EXIT_SANITY if problems else EXIT_OK


def _single_threshold_table(reports: Mapping[str, Any], tau: float, title: str) -> str:
    first = next(iter(reports.values()))
    parts = list(first.parts)
    header = ["Method"] + parts
    rows = [header] + [[label] + [f"{rep.pcp.get(p, {}).get(tau, 0.0):.1f}" for p in parts] for label, rep in reports.items()]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [title]
    for r in rows:
        lines.append(" | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


def cmd_synth_gen(cfg: RunConfig) -> int:
    side = int(cfg["image_size"])
    synth = SynthConfig(
        seed=int(cfg["seed"]),
        n_train=int(cfg["n_train"]),
        n_test=int(cfg["n_test"]),
        n_clusters=int(cfg["n_clusters"]),
        n_classes=int(cfg["n_classes"]),
        raster=not cfg["vector"],
        image_size=ImageSize(side, side),
        size_jitter=float(cfg["size_jitter"]),
        box_jitter=float(cfg["box_jitter"]),
        feature_noise=float(cfg["feature_noise"]),
        clutter=int(cfg["clutter"]),
        stripe_contrast=float(cfg["stripe_contrast"]),
    )
    world = generate(synth)
    train_path, test_path = world.write(cfg.output_dir)
    summary = {
        "train": str(train_path),
        "test": str(test_path),
        "n_train": len(world.train),
        "n_test": len(world.test),
        "mode": "raster" if synth.raster else "vector",
        "parts": world.part_names,
    }
    text = f"wrote {len(world.train)} training and {len(world.test)} test records ({summary['mode']}) to {cfg.output_dir}"
    _emit(cfg, text, summary)
    return EXIT_OK


COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "build-index": cmd_build_index,
    "localize": cmd_localize,
    "train-regressor": cmd_train_regressor,
    "refine": cmd_refine,
    "train-classifier": cmd_train_classifier,
    "recognize": cmd_recognize,
    "evaluate": cmd_evaluate,
    "synth-gen": cmd_synth_gen,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

S = argparse.SUPPRESS


def _global_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=S, help="JSON config file; flags override its values")
    g.add_argument("--threads", type=int, default=S, help="worker threads (default 1)")
    g.add_argument("--seed", type=int, default=S, help="random seed for training and generation (default 0)")
    g.add_argument("--output-dir", default=S, help="directory for outputs (default: current directory)")
    g.add_argument("--format", choices=("text", "structured"), default=S, help="stdout and report format (default text)")
    g.add_argument("-v", "--verbose", action="count", default=S, help="more logging; repeat for debug output")


def _transfer_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("transfer")
    g.add_argument("--m", type=int, default=S, help="neighbors per transfer step (default 2)")
    g.add_argument("--fusion", choices=("union", "average", "intersection"), default=S, help="box fusion (default union)")
    g.add_argument("--max-iters", type=int, default=S, help="iteration cap (default 3)")
    g.add_argument("--stability-iou", type=float, default=S, help="stop when consecutive boxes overlap this much (default 0.9)")
    g.add_argument("--score-threshold", type=float, default=S, help="stop when the raw classifier scores above this")
    g.add_argument("--metric", choices=("cosine", "euclidean"), default=S, help="feature distance (default cosine)")


def _flag(p: argparse.ArgumentParser, name: str, **kw: Any) -> None:
    p.add_argument(name, default=S, **kw)


def _switch(p: argparse.ArgumentParser, name: str, help: str) -> None:
    p.add_argument(name, action="store_true", default=S, help=help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parttransfer",
        description="Localize objects and parts by transferring boxes from nearest training images.",
        allow_abbrev=False,
    )
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, description=help, allow_abbrev=False)
        _global_flags(p)
        return p

    p = add("build-index", "validate a training manifest and its features and write an index summary")
    _flag(p, "--train", help="training manifest (JSONL)")
    _flag(p, "--metric", choices=("cosine", "euclidean"), help="feature distance (default cosine)")

    p = add("localize", "localize objects (and optionally parts) in test images")
    _flag(p, "--train", help="training manifest")
    _flag(p, "--test", help="manifest of images to localize")
    _transfer_flags(p)
    _switch(p, "--parts", "also localize every part annotated in the training set")
    _flag(p, "--part-names", help="comma-separated parts to localize (implies --parts)")
    _switch(p, "--seed-oracle-object", "take the object box from the test manifest and localize parts inside it")
    _flag(p, "--only", help="comma-separated test ids to process")
    _switch(p, "--fail-fast", "abort on the first per-image failure")
    _switch(p, "--exclude-self", "never retrieve an image as its own neighbor (leave-one-out)")
    _flag(p, "--raw-classifier", help="classifier model used by --score-threshold termination")

    p = add("train-regressor", "fit ridge box regressors on leave-one-out predictions for the training set")
    _flag(p, "--train", help="training manifest")
    _flag(p, "--localizations", help="precomputed training localizations; otherwise computed leave-one-out")
    _transfer_flags(p)
    _flag(p, "--lam", type=float, help="ridge penalty (default 1.0)")
    _flag(p, "--convention", choices=("size", "literal"), help="x/y target normalization (default size)")
    _switch(p, "--intercept", "append a constant-1 feature")
    _switch(p, "--apply-to-parts", "also fit one regressor per part")
    p.add_argument("--class-agnostic", dest="class_specific", action="store_false", default=S, help="fit a single pooled model")
    p.add_argument("--no-pooled", dest="pooled", action="store_false", default=S, help="omit the pooled fallback model")

    p = add("refine", "apply trained regressors to localizations")
    _flag(p, "--test", help="manifest of the localized images")
    _flag(p, "--localizations", help="localizations.jsonl to refine")
    _flag(p, "--models", help="directory holding regressor_<field>.model files")
    _switch(p, "--apply-to-parts", "refine part boxes too")
    _switch(p, "--fallback", "keep a box unchanged when its class has no regressor")
    _flag(p, "--class-source", choices=("pooled", "truth", "classifier"), help="which class's regressor to apply")
    _flag(p, "--classifier", help="classifier model for --class-source classifier")

    p = add("train-classifier", "train one-vs-all linear SVMs on concatenated region features")
    _flag(p, "--train", help="training manifest")
    _flag(p, "--regions", help=f"comma-separated regions (default {','.join(DEFAULT_REGIONS)})")
    _flag(p, "--C", type=float, help="SVM regularization constant (default 1.0)")
    _flag(p, "--epochs", type=int, help="SGD epochs (default 50)")
    _flag(p, "--localizations", help="take region boxes from these localizations instead of ground truth")

    p = add("recognize", "classify test images")
    _flag(p, "--test", help="test manifest")
    _flag(p, "--classifier", help="classifier model")
    _flag(p, "--localizations", help="region boxes; ground-truth boxes are used when omitted")
    _flag(p, "--top-k", type=int, help="scores to keep per image (default 3)")

    p = add("evaluate", "score localizations (PCP) and recognitions (accuracy)")
    _flag(p, "--truth", help="ground-truth manifest")
    p.add_argument("--run", action="append", default=S, metavar="LABEL=PATH", help="localizations to score; repeatable (LABEL may not contain =)")
    p.add_argument("--recognition", action="append", default=S, metavar="LABEL=PATH", help="recognition output; repeatable (LABEL may not contain =)")
    _flag(p, "--thresholds", help="comma-separated IoU thresholds (default 0.5,0.4,0.3)")
    _flag(p, "--part-names", help="comma-separated parts to score (default: object plus every predicted part)")
    _switch(p, "--strict", "count a hit only when IoU is strictly above the threshold")
    _switch(p, "--absent-as-miss", "score missing predictions as misses instead of skipping them")

    p = add("synth-gen", "write a seeded synthetic world")
    _flag(p, "--n-train", type=int, help="training images (default 500)")
    _flag(p, "--n-test", type=int, help="test images (default 200)")
    _flag(p, "--n-clusters", type=int, help="layout clusters (default 8)")
    _flag(p, "--n-classes", type=int, help="texture classes in raster mode (default 4)")
    _switch(p, "--vector", "write precomputed feature vectors instead of images")
    _flag(p, "--image-size", type=int, help="nominal image side in pixels (default 96)")
    _flag(p, "--size-jitter", type=float, help="log-uniform image size spread (default 0.2)")
    _flag(p, "--box-jitter", type=float, help="object box noise within a cluster (default 0.05)")
    _flag(p, "--feature-noise", type=float, help="feature or pixel noise std (default 0.1)")
    _flag(p, "--clutter", type=int, help="textured background patches per image (default 2)")
    _flag(p, "--stripe-contrast", type=float, help="class texture amplitude (default 0.12)")
    return parser


def _load_config_file(path: str) -> dict[str, Any]:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return _rebase_paths(data, p.parent)


def _rebase_paths(data: dict[str, Any], base: Path) -> dict[str, Any]:
    """Relative paths inside a config file are taken relative to that file."""
    out = {}
    for key, value in data.items():
        if isinstance(value, dict) and key in COMMAND_DEFAULTS:
            out[key] = _rebase_paths(value, base)
        elif key in INPUT_PATH_KEYS + ("output_dir",) and isinstance(value, str):
            out[key] = str(base / value)
        elif key in LABELLED_PATH_KEYS and isinstance(value, list):
            out[key] = [f"{lab}={base / pth}" for lab, pth in map(_split_labelled, value)]
        else:
            out[key] = value
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    verbose = ns.pop("verbose", 0)
    logging.basicConfig(
        level=logging.DEBUG if verbose > 1 else logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        file_values = _load_config_file(ns.pop("config")) if "config" in ns else None
        cfg = RunConfig.resolve(command, file_values, ns)
        cfg.validate()
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        (cfg.output_dir / f"effective_config_{command}.json").write_text(
            json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n"
        )
        return COMMANDS[command](cfg)
    except (TransferError, ValueError, KeyError, OSError) as exc:
        print(f"parttransfer {command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
