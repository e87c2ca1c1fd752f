from __future__ import annotations

import numpy as np
import pytest

from parttransfer.errors import DimensionError, EmptyInputError
from parttransfer.recognition import (
    ClassifierModel,
    RegionLayout,
    concat_regions,
    predict,
    svm_objective,
    train_svm,
)


def clusters(seed=0, n=40):
    rng = np.random.default_rng(seed)
    pos = rng.normal([5.0, 0.0], 0.5, size=(n, 2))
    neg = rng.normal([-5.0, 0.0], 0.5, size=(n, 2))
    return [(x, "pos") for x in pos] + [(x, "neg") for x in neg]


class TestConcat:
    layout = RegionLayout((("a", 2), ("b", 2)))

    def test_order(self):
        out = concat_regions({"b": np.array([3.0, 4.0]), "a": np.array([1.0, 2.0])}, self.layout)
        assert out.tolist() == [1, 2, 3, 4]

    def test_zero_fill(self):
        assert concat_regions({"a": np.array([1.0, 2.0]), "b": None}, self.layout).tolist() == [1, 2, 0, 0]
        assert concat_regions({"a": np.array([1.0, 2.0])}, self.layout).tolist() == [1, 2, 0, 0]

    def test_wrong_dim(self):
        with pytest.raises(DimensionError):
            concat_regions({"a": np.ones(2), "b": np.ones(3)}, self.layout)

    def test_layout_json(self):
        assert RegionLayout.from_json(self.layout.to_json()) == self.layout
        assert self.layout.total_dim == 4 and self.layout.names == ["a", "b"]


class TestTraining:
    def test_separable_clusters(self):
        data = clusters()
        model = train_svm(data, C=1.0, epochs=30, seed=0)
        assert all(predict(model, x)[0] == y for x, y in data)

    def test_duplicate_point_keeps_labels(self):
        data = clusters(1)
        base = train_svm(data, epochs=30)
        dup = train_svm(data + [data[3]], epochs=30)
        assert [predict(base, x)[0] for x, _ in data] == [predict(dup, x)[0] for x, _ in data]

    def test_one_example_each(self):
        data = [(np.array([1.0, 0.0]), "a"), (np.array([-1.0, 0.0]), "b")]
        model = train_svm(data, C=1.0, epochs=20)
        assert [predict(model, x)[0] for x, _ in data] == ["a", "b"]

    def test_three_classes(self):
        rng = np.random.default_rng(2)
        centers = {"x": [6, 0], "y": [-3, 5], "z": [-3, -5]}
        data = [(rng.normal(c, 0.5), k) for k, c in centers.items() for _ in range(30)]
        model = train_svm(data, epochs=40)
        assert model.classes == ("x", "y", "z")
        assert np.mean([predict(model, x)[0] == y for x, y in data]) == 1.0

    def test_deterministic(self):
        a = train_svm(clusters(3), seed=11, epochs=10)
        b = train_svm(clusters(3), seed=11, epochs=10)
        assert a.weights.tobytes() == b.weights.tobytes() and a.biases.tobytes() == b.biases.tobytes()

    def test_seed_changes_order_only(self):
        a = train_svm(clusters(3), seed=1, epochs=10)
        b = train_svm(clusters(3), seed=2, epochs=10)
        assert not np.array_equal(a.weights, b.weights)

    def test_objective_history_monotone(self):
        model = train_svm(clusters(4), epochs=25)
        h = model.history
        assert h.shape == (25, 2)
        assert np.all(np.diff(h, axis=0) <= 1e-6)

    def test_history_matches_objective(self):
        data = clusters(5)
        model = train_svm(data, C=2.0, epochs=5)
        X = np.vstack([x for x, _ in data])
        Y = np.array([[1.0 if y == c else -1.0 for c in model.classes] for _, y in data])
        np.testing.assert_allclose(svm_objective(model.weights, model.biases, X, Y, 2.0), model.history[-1])

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            train_svm([])
        with pytest.raises(EmptyInputError):
            train_svm([(np.ones(2), "a"), (np.zeros(2), "a")])
        with pytest.raises(DimensionError):
            train_svm([(np.ones(2), "a"), (np.ones(3), "b")])
        with pytest.raises(ValueError):
            train_svm(clusters(), C=0)


class TestPredict:
    def test_zero_model_picks_first_class(self):
        model = ClassifierModel(("a", "b", "c"), np.zeros((3, 4)), np.zeros(3))
        label, scores = predict(model, np.arange(4.0))
        assert label == "a" and scores == {"a": 0.0, "b": 0.0, "c": 0.0}

    def test_scores_are_biases_for_zero_weights(self):
        model = ClassifierModel(("a", "b"), np.zeros((2, 2)), np.array([-1.0, 0.5]))
        assert predict(model, np.ones(2)) == ("b", {"a": -1.0, "b": 0.5})

    def test_positive_scaling(self):
        rng = np.random.default_rng(6)
        model = ClassifierModel(("a", "b", "c"), rng.normal(size=(3, 5)), np.zeros(3))
        for _ in range(20):
            x = rng.normal(size=5)
            assert predict(model, x)[0] == predict(model, 2.0 * x)[0]

    def test_dim_mismatch(self):
        model = ClassifierModel(("a", "b"), np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(DimensionError):
            predict(model, np.ones(3))

    def test_save_load(self, tmp_path):
        layout = RegionLayout((("full", 1), ("object", 1)))
        model = train_svm(clusters(7), epochs=5, layout=layout)
        model.save(tmp_path / "m.model")
        back = ClassifierModel.load(tmp_path / "m.model")
        assert back.classes == model.classes and back.layout == layout
        np.testing.assert_allclose(back.weights, model.weights, rtol=1e-6)
        np.testing.assert_allclose(back.biases, model.biases, rtol=1e-6)
