from __future__ import annotations

import hashlib

import numpy as np
import pytest

from parttransfer.errors import ConfigError
from parttransfer.evaluation import pcp
from parttransfer.features import FULL, OBJECT
from parttransfer.geometry import ImageSize
from parttransfer.index import build_index, load_manifest, validate_record
from parttransfer.synthetic import PartSpec, SynthConfig, center_prior_boxes, generate


def digest_tree(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.mark.parametrize("raster", [False, True])
def test_same_seed_same_bytes(tmp_path, raster):
    cfg = SynthConfig(seed=5, n_train=12, n_test=4, raster=raster, image_size=ImageSize(40, 40))
    generate(cfg).write(tmp_path / "a")
    generate(cfg).write(tmp_path / "b")
    a, b = digest_tree(tmp_path / "a"), digest_tree(tmp_path / "b")
    assert a and a == b


def test_different_seed_differs():
    a = generate(SynthConfig(seed=1, n_train=5, n_test=0, raster=False))
    b = generate(SynthConfig(seed=2, n_train=5, n_test=0, raster=False))
    assert [r.object_box for r in a.train] != [r.object_box for r in b.train]


@pytest.mark.parametrize("raster", [False, True])
def test_annotations_valid(raster):
    world = generate(SynthConfig(seed=3, n_train=40, n_test=10, raster=raster, image_size=ImageSize(48, 48)))
    for rec in world.train + world.test:
        validate_record(rec)
        obj = rec.object_box
        assert obj.w > 0 and obj.h > 0
        for name in world.part_names:
            part = rec.box(name)
            assert part is not None
            assert part.x >= obj.x - 1e-9 and part.y >= obj.y - 1e-9
            assert part.x2 <= obj.x2 + 1e-9 and part.y2 <= obj.y2 + 1e-9


def test_written_manifest_round_trip(tmp_path):
    world = generate(SynthConfig(seed=4, n_train=6, n_test=3, raster=False))
    train_path, test_path = world.write(tmp_path)
    train = load_manifest(train_path)
    assert [r.id for r in train] == [r.id for r in world.train]
    assert [r.object_box for r in train] == [r.object_box for r in world.train]
    assert len(load_manifest(test_path)) == 3


def test_noiseless_neighbours_share_cluster():
    cfg = SynthConfig(seed=7, n_train=80, n_test=30, raster=False, feature_noise=0.0, box_jitter=0.0)
    world = generate(cfg)
    index = build_index(world.train, world.provider, stages=(FULL, OBJECT))
    for rec in world.test:
        q = world.provider.provide(rec.id, rec.size.full_box(), FULL)
        nn = index.knn(q, FULL, m=1)[0]
        assert world.clusters[nn.id] == world.clusters[rec.id]


def test_vector_features_encode_layout():
    cfg = SynthConfig(seed=8, n_train=3, n_test=0, raster=False, feature_noise=0.0)
    world = generate(cfg)
    rec = world.train[0]
    vec = world.vectors[rec.id]["object"]
    head_at = cfg.n_clusters + 4
    head = rec.box("head")
    obj = rec.object_box
    np.testing.assert_allclose(vec[head_at : head_at + 4], [(head.x - obj.x) / obj.w, (head.y - obj.y) / obj.h, head.w / obj.w, head.h / obj.h])
    assert vec[: cfg.n_clusters].sum() == 1.0


def test_raster_object_is_brighter():
    world = generate(SynthConfig(seed=9, n_train=5, n_test=0, image_size=ImageSize(64, 64), feature_noise=0.0, clutter=0))
    for rec in world.train:
        px = world.rasters[rec.id].pixels
        obj = rec.object_box
        inside = px[int(obj.y) + 1 : int(obj.y2) - 1, int(obj.x) + 1 : int(obj.x2) - 1].mean()
        assert inside > px[: max(1, int(obj.y)), :].mean() or inside > px[:, : max(1, int(obj.x))].mean()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"part_spec": (PartSpec("head", (0.8, 0.1, 0.4, 0.2)),)},
        {"part_spec": (PartSpec("a", (0.1, 0.1, 0.2, 0.2)), PartSpec("a", (0.5, 0.5, 0.2, 0.2)))},
        {"n_train": 0},
        {"feature_noise": -1.0},
        {"size_jitter": 1.5},
    ],
)
def test_bad_config(kwargs):
    with pytest.raises(ConfigError):
        SynthConfig(**kwargs)


def test_center_prior():
    world = generate(SynthConfig(seed=0, n_train=50, n_test=20, raster=False))
    boxes = center_prior_boxes(world.train, world.test)
    assert set(boxes) == {r.id for r in world.test}
    for rec in world.test:
        b = boxes[rec.id]
        assert 0 <= b.x and b.x2 <= rec.size.width and 0 <= b.y and b.y2 <= rec.size.height
    rep = pcp({k: {"object": v} for k, v in boxes.items()}, world.test)
    assert 0.0 <= rep.pcp["object"][0.5] < 100.0
