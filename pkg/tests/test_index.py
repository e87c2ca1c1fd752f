from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_world
from parttransfer.errors import (
    DuplicateIdError,
    EmptyIndexError,
    ManifestError,
    StageUnavailableError,
    UnknownImageError,
)
from parttransfer.features import FULL, OBJECT, Metric, distance, write_fvec
from parttransfer.geometry import BoundingBox, ImageSize
from parttransfer.index import (
    AnnotatedImage,
    FeatureRef,
    build_index,
    load_manifest,
    nearest_rows,
    provider_from_records,
    write_manifest,
)


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return path


def rec(i, **extra):
    out = {"id": f"r{i}", "width": 100, "height": 80, "features": {"full": [1.0, float(i)]}}
    out.update(extra)
    return out


class TestManifest:
    def test_three_records(self, tmp_path):
        path = write_lines(tmp_path / "m.jsonl", [rec(0), rec(1), rec(2)])
        records = load_manifest(path)
        index = build_index(records, provider_from_records(records))
        assert len(index) == 3

    def test_full_record_fields(self, tmp_path):
        write_fvec(tmp_path / "f.fvec", np.arange(6, dtype=np.float32).reshape(3, 2))
        row = {
            "id": "x", "width": 50, "height": 40, "class": "wren",
            "object_box": [1, 2, 30, 20], "parts": {"head": [5, 5, 4, 4], "tail": None},
            "features": {"full": {"file": "f.fvec", "row": 2}, "part:head": [0.5, 0.5]},
        }
        (r,) = load_manifest(write_lines(tmp_path / "m.jsonl", [row]))
        assert r.class_label == "wren" and r.object_box == BoundingBox(1, 2, 30, 20)
        assert r.part_boxes == {"head": BoundingBox(5, 5, 4, 4), "tail": None}
        assert r.feature_refs[FULL] == FeatureRef(tmp_path / "f.fvec", 2)
        provider = provider_from_records([r])
        assert provider.provide("x", r.size.full_box(), FULL).tolist() == [4.0, 5.0]

    def test_blank_lines_ignored(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(rec(0)) + "\n\n" + json.dumps(rec(1)) + "\n")
        assert [r.id for r in load_manifest(path)] == ["r0", "r1"]

    def test_invalid_json_has_line_number(self, tmp_path):
        path = write_lines(tmp_path / "m.jsonl", [rec(0), "{not json"])
        with pytest.raises(ManifestError, match=r"m\.jsonl:2:"):
            load_manifest(path)

    def test_duplicate_id_named(self, tmp_path):
        path = write_lines(tmp_path / "m.jsonl", [rec(0), rec(1), rec(0)])
        with pytest.raises(DuplicateIdError, match=r"'r0'.*line 1"):
            load_manifest(path)

    def test_box_exceeding_size_names_record(self, tmp_path):
        path = write_lines(tmp_path / "m.jsonl", [rec(0), rec(7, object_box=[60, 10, 50, 10])])
        with pytest.raises(ManifestError, match=r":2:.*'r7'.*exceeds"):
            load_manifest(path)

    def test_unknown_field(self, tmp_path):
        with pytest.raises(ManifestError, match="unknown fields"):
            load_manifest(write_lines(tmp_path / "m.jsonl", [rec(0, colour="red")]))

    def test_missing_size(self, tmp_path):
        with pytest.raises(ManifestError, match="width"):
            load_manifest(write_lines(tmp_path / "m.jsonl", [{"id": "a", "height": 3}]))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.jsonl")

    def test_missing_feature_file_named(self, tmp_path):
        path = write_lines(tmp_path / "m.jsonl", [rec(0, features={"full": {"file": "gone.fvec", "row": 0}})])
        records = load_manifest(path)
        with pytest.raises(ManifestError, match="gone.fvec"):
            provider_from_records(records)

    def test_feature_row_out_of_range(self, tmp_path):
        write_fvec(tmp_path / "f.fvec", np.ones((2, 2)))
        path = write_lines(tmp_path / "m.jsonl", [rec(0, features={"full": {"file": "f.fvec", "row": 5}})])
        with pytest.raises(ManifestError, match="row 5"):
            provider_from_records(load_manifest(path))

    def test_write_then_load(self, tmp_path):
        write_fvec(tmp_path / "f.fvec", np.ones((1, 3)))
        r = AnnotatedImage(
            "q", ImageSize(10, 20), "c1", BoundingBox(1, 1, 5, 5), {"head": None},
            {FULL: FeatureRef(tmp_path / "f.fvec", 0), OBJECT: np.array([1.0, 2.0, 3.0])},
        )
        write_manifest(tmp_path / "out.jsonl", [r])
        (back,) = load_manifest(tmp_path / "out.jsonl")
        assert back.to_json(tmp_path) == r.to_json(tmp_path)


class TestBuildIndex:
    def test_empty(self):
        with pytest.raises(EmptyIndexError):
            build_index([], None)

    def test_duplicate_ids(self):
        records, provider = make_world([("a", (10, 10), None, None, [1, 0]), ("a", (10, 10), None, None, [0, 1])])
        with pytest.raises(DuplicateIdError):
            build_index(records, provider)

    def test_stage_needs_box(self):
        records, provider = make_world([("a", (10, 10), None, None, [1, 0])], stages=("full", "object"))
        with pytest.raises(StageUnavailableError):
            build_index(records, provider, stages=(FULL, OBJECT))


class TestKnn:
    def test_exact_match_first(self, tiny_index):
        index, _ = tiny_index
        (n,) = index.knn(np.array([1.0, 0.0]), FULL, 1)
        assert n.id == "a" and n.distance == pytest.approx(0.0, abs=1e-15)

    def test_exclusion(self, tiny_index):
        index, _ = tiny_index
        (n,) = index.knn(np.array([1.0, 0.0]), FULL, 1, exclude="a")
        assert n.id == "b"

    def test_m_larger_than_index(self, tiny_index):
        index, _ = tiny_index
        out = index.knn(np.array([1.0, 0.0]), FULL, 10)
        assert [n.id for n in out] == ["a", "b", "c"]
        assert [n.distance for n in out] == sorted(n.distance for n in out)

    def test_unknown_stage(self, tiny_index):
        index, _ = tiny_index
        with pytest.raises(StageUnavailableError):
            index.knn(np.array([1.0, 0.0]), OBJECT, 1)

    def test_row_lookup(self, tiny_index):
        index, _ = tiny_index
        assert index.record("c").object_box == BoundingBox(50, 50, 40, 40)
        with pytest.raises(UnknownImageError):
            index.row_of("zzz")

    def test_ties_go_to_earlier_record(self):
        mat = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
        rows, _ = nearest_rows(mat, np.array([1.0, 0.0]), 3, Metric.COSINE)
        assert rows.tolist() == [1, 2, 3]

    def test_m_must_be_positive(self):
        with pytest.raises(ValueError):
            nearest_rows(np.ones((2, 2)), np.ones(2), 0)

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(1, 60), st.integers(1, 8), st.integers(1, 12), st.integers(0, 10_000),
        st.sampled_from(["cosine", "euclidean"]), st.booleans(),
    )
    def test_against_full_sort(self, n, d, m, seed, metric, exclude):
        rng = np.random.default_rng(seed)
        # rows drawn from a small pool so exact duplicates, and hence ties, are common
        pool = rng.normal(size=(max(1, n // 3), d))
        mat = pool[rng.integers(len(pool), size=n)]
        q = pool[0] if rng.random() < 0.3 else rng.normal(size=d)
        ex = int(rng.integers(n)) if exclude else None
        rows, dists = nearest_rows(mat, q, m, metric, ex)
        expected = sorted((distance(mat[i], q, metric), i) for i in range(n) if i != ex)[:m]
        assert rows.tolist() == [i for _, i in expected]
        np.testing.assert_allclose(dists, [v for v, _ in expected], atol=1e-12)
