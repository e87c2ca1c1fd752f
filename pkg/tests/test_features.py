from __future__ import annotations

import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from parttransfer.errors import DegenerateBoxError, DimensionError, StageUnavailableError, UndefinedNormError, UnknownImageError
from parttransfer.features import (
    FULL,
    OBJECT,
    CompositeProvider,
    Metric,
    PrecomputedProvider,
    RasterImage,
    RasterProvider,
    Stage,
    distance,
    distances,
    grid_descriptor,
    pack_fvec,
    read_fvec,
    read_pgm,
    unpack_fvec,
    write_fvec,
    write_pgm,
)
from parttransfer.geometry import BoundingBox, ImageSize


def smooth_raster(seed: int, h: int = 40, w: int = 48) -> RasterImage:
    rng = np.random.default_rng(seed)
    px = ndimage.gaussian_filter(rng.random((h, w)), sigma=3.0, mode="nearest")
    px = (px - px.min()) / (px.max() - px.min())
    return RasterImage(px)


def reference_descriptor(pixels: np.ndarray, region: BoundingBox) -> np.ndarray:
    """Loop-by-loop restatement of the descriptor recipe."""
    h, w = pixels.shape
    n = 64
    patch = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            sx = min(max(region.x + (j + 0.5) / n * region.w - 0.5, 0.0), w - 1.0)
            sy = min(max(region.y + (i + 0.5) / n * region.h - 0.5, 0.0), h - 1.0)
            x0, y0 = int(math.floor(sx)), int(math.floor(sy))
            x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
            fx, fy = sx - x0, sy - y0
            top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
            bot = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
            patch[i, j] = top * (1 - fy) + bot * fy
    hist = np.zeros(128)
    for i in range(n):
        for j in range(n):
            gx = 0.5 * (patch[i, min(j + 1, n - 1)] - patch[i, max(j - 1, 0)])
            gy = 0.5 * (patch[min(i + 1, n - 1), j] - patch[max(i - 1, 0), j])
            ang = math.atan2(gy, gx) % (2 * math.pi)
            b = int(ang // (math.pi / 4)) % 8
            cell = (i // 16) * 4 + (j // 16)
            hist[cell * 8 + b] += math.hypot(gx, gy)
    nrm = np.linalg.norm(hist)
    return hist / nrm if nrm > 1e-12 else np.full(128, 1 / math.sqrt(128))


class TestStage:
    @pytest.mark.parametrize("text", ["full", "object", "part:head"])
    def test_round_trip(self, text):
        assert str(Stage.parse(text)) == text

    def test_part_constructor(self):
        assert Stage.for_part("head") == Stage.parse("part:head")
        assert Stage.parse("full") == FULL and Stage.parse("object") == OBJECT

    def test_empty_part_name(self):
        with pytest.raises(ValueError):
            Stage.for_part("")


class TestDescriptor:
    def test_constant_crop_is_uniform(self):
        img = RasterImage(np.full((20, 30), 0.4))
        v = grid_descriptor(img, BoundingBox(2, 3, 10, 12))
        assert v.shape == (128,)
        assert np.all(v == 1.0 / math.sqrt(128))

    @settings(max_examples=25, deadline=None)
    @given(
        arrays(np.float64, (12, 16), elements=st.floats(0, 1)),
        st.floats(0, 10), st.floats(0, 8), st.floats(0.5, 16), st.floats(0.5, 12),
    )
    def test_unit_norm(self, px, x, y, w, h):
        v = grid_descriptor(RasterImage(px), BoundingBox(x, y, w, h))
        assert v.shape == (128,)
        assert abs(np.linalg.norm(v) - 1.0) < 1e-9

    @pytest.mark.parametrize("seed", range(3))
    def test_matches_loop_reference(self, seed):
        img = smooth_raster(seed, 23, 31)
        region = BoundingBox(2.3, 1.7, 21.5, 17.25)
        np.testing.assert_allclose(grid_descriptor(img, region), reference_descriptor(img.pixels, region), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_two_times_upsampled_copy_is_similar(self, seed):
        img = smooth_raster(seed)
        # half-pixel aligned bilinear upsampling, independent of the package code
        big = RasterImage(ndimage.zoom(img.pixels, 2, order=1, grid_mode=True, mode="nearest"))
        a = grid_descriptor(img, img.size.full_box())
        b = grid_descriptor(big, big.size.full_box())
        assert float(a @ b) > 0.99

    def test_deterministic(self):
        img = smooth_raster(7)
        r = BoundingBox(3, 4, 20, 20)
        assert grid_descriptor(img, r).tobytes() == grid_descriptor(img, r).tobytes()

    def test_region_outside_image(self):
        with pytest.raises(DegenerateBoxError):
            grid_descriptor(smooth_raster(0), BoundingBox(100, 100, 5, 5))

    def test_vertical_edge_fills_horizontal_bins(self):
        px = np.zeros((32, 32))
        px[:, 16:] = 1.0
        v = grid_descriptor(RasterImage(px), BoundingBox(0, 0, 32, 32)).reshape(16, 8)
        # gradient points along +x: angle 0 lands in bin 0
        assert v[:, 1:].sum() == 0.0 and v[:, 0].sum() > 0


class TestDistance:
    def test_self_is_zero(self):
        v = np.array([0.3, -1.2, 2.0])
        assert distance(v, v, "cosine") == pytest.approx(0.0, abs=1e-15)
        assert distance(v, v, "euclidean") == 0.0

    def test_orthogonal(self):
        assert distance(np.array([1.0, 0.0]), np.array([0.0, 1.0]), Metric.COSINE) == 1.0

    def test_zero_norm(self):
        with pytest.raises(UndefinedNormError):
            distance(np.zeros(3), np.ones(3), "cosine")
        with pytest.raises(UndefinedNormError):
            distances(np.ones((2, 3)), np.zeros(3), "cosine")

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            distance(np.ones(2), np.ones(3))
        with pytest.raises(DimensionError):
            distances(np.ones((4, 2)), np.ones(3))

    @given(
        arrays(np.float64, 5, elements=st.floats(-10, 10)),
        arrays(np.float64, 5, elements=st.floats(-10, 10)),
        arrays(np.float64, 5, elements=st.floats(-10, 10)),
    )
    def test_euclidean_axioms(self, a, b, c):
        dab = distance(a, b, "euclidean")
        assert dab >= 0 and dab == distance(b, a, "euclidean")
        assert dab <= distance(a, c, "euclidean") + distance(c, b, "euclidean") + 1e-9

    @given(arrays(np.float64, (6, 4), elements=st.floats(-5, 5)), arrays(np.float64, 4, elements=st.floats(-5, 5)))
    def test_batch_agrees_with_single(self, mat, q):
        for metric in ("euclidean", "cosine"):
            if metric == "cosine" and (np.linalg.norm(q) < 1e-3 or np.any(np.linalg.norm(mat, axis=1) < 1e-3)):
                continue
            batch = distances(mat, q, metric)
            single = [distance(row, q, metric) for row in mat]
            np.testing.assert_allclose(batch, single, atol=1e-9)


class TestFvec:
    def test_bit_exact_layout(self):
        data = np.array([[1.0, -2.5], [0.125, 3.0], [7.0, 0.0]])
        expected = b"FVEC" + struct.pack("<II", 3, 2) + struct.pack("<6f", 1.0, -2.5, 0.125, 3.0, 7.0, 0.0)
        assert pack_fvec(data) == expected

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(17, 9)).astype(np.float32)
        write_fvec(tmp_path / "x.fvec", data)
        assert np.array_equal(read_fvec(tmp_path / "x.fvec"), data)

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            unpack_fvec(b"FVEX" + b"\0" * 8)

    def test_truncated(self):
        buf = pack_fvec(np.ones((2, 2)))
        with pytest.raises(ValueError, match="truncated"):
            unpack_fvec(buf[:-1])

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / "y.fvec").write_bytes(pack_fvec(np.ones((1, 2))) + b"x")
        with pytest.raises(ValueError, match="trailing"):
            read_fvec(tmp_path / "y.fvec")


class TestPgm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = RasterImage(np.rint(rng.random((7, 11)) * 255) / 255)
        write_pgm(tmp_path / "a.pgm", img)
        back = read_pgm(tmp_path / "a.pgm")
        assert back.pixels.shape == (7, 11)
        np.testing.assert_allclose(back.pixels, img.pixels, atol=1e-12)

    def test_header_comments(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
        assert read_pgm(tmp_path / "c.pgm").pixels.tolist() == [[0.0, 1.0]]

    def test_not_pgm(self, tmp_path):
        (tmp_path / "d.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(ValueError, match="P5"):
            read_pgm(tmp_path / "d.pgm")


class TestProviders:
    def test_precomputed_passthrough(self):
        vec = np.array([0.5, 0.25, -1.0])
        p = PrecomputedProvider({"a": ImageSize(10, 10)}, {("a", FULL): vec})
        out = p.provide("a", BoundingBox(0, 0, 10, 10), FULL)
        assert np.array_equal(out, vec)
        assert not out.flags.writeable

    def test_precomputed_errors(self):
        p = PrecomputedProvider({"a": ImageSize(10, 10)}, {("a", FULL): np.ones(2)})
        with pytest.raises(UnknownImageError):
            p.provide("b", BoundingBox(0, 0, 1, 1), FULL)
        with pytest.raises(StageUnavailableError):
            p.provide("a", BoundingBox(0, 0, 1, 1), OBJECT)

    def test_mixed_dims(self):
        with pytest.raises(DimensionError):
            PrecomputedProvider({"a": ImageSize(1, 1)}, {("a", FULL): np.ones(2), ("a", OBJECT): np.ones(3)})

    def test_raster_determinism_and_lazy_files(self, tmp_path):
        img = smooth_raster(3)
        write_pgm(tmp_path / "r.pgm", img)
        p = RasterProvider({"r": tmp_path / "r.pgm"})
        region = BoundingBox(4, 4, 20, 18)
        a = p.provide("r", region, OBJECT)
        b = p.provide("r", region, OBJECT)
        assert a.tobytes() == b.tobytes()
        assert p.image_size("r") == ImageSize(48, 40)

    def test_composite_prefers_raster(self):
        img = smooth_raster(4)
        pre = PrecomputedProvider({"r": img.size, "v": ImageSize(5, 5)}, {("r", FULL): np.ones(128), ("v", FULL): np.ones(128)})
        comp = CompositeProvider(RasterProvider({"r": img}), pre)
        full = img.size.full_box()
        assert np.array_equal(comp.provide("r", full, FULL), grid_descriptor(img, full))
        assert np.array_equal(comp.provide("v", BoundingBox(0, 0, 5, 5), FULL), np.ones(128))
        with pytest.raises(UnknownImageError):
            comp.image_size("zzz")
