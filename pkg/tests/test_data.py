import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtcyp.data import (
    L1C_BANDS,
    CropType,
    Scene,
    YieldPoint,
    keys_kernel,
    make_folds,
    make_tiles,
    merge_resolution_groups,
    normalize_yields,
    rasterize_points,
    resample_bands,
    select_bands,
    tile_plan,
)

GT20 = (500000.0, 20.0, 0.0, 5200000.0, 0.0, -20.0)


def _scene(bands, pixel=20.0, gt=GT20, names=None, level="L2A"):
    bands = np.asarray(bands, dtype=np.float32)
    if bands.ndim == 2:
        bands = bands[None]
    names = names or [f"B{i:02d}" for i in range(bands.shape[0])]
    return Scene("s", bands, names, pixel_size_m=pixel, geotransform=gt, level=level)


def _keys_1d(samples, x, a=-0.5):
    """Scalar cubic convolution at position x with replicated edges."""
    def w(t):
        t = abs(t)
        if t <= 1:
            return (a + 2) * t**3 - (a + 3) * t**2 + 1
        if t < 2:
            return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
        return 0.0

    base = int(np.floor(x))
    total = 0.0
    for k in range(base - 1, base + 3):
        total += samples[min(max(k, 0), len(samples) - 1)] * w(x - k)
    return total


class TestResample:
    def test_constant_grid_stays_constant(self):
        out = resample_bands(_scene(np.full((3, 3), 0.37)), 10.0)
        assert out.bands.shape == (1, 6, 6)
        np.testing.assert_allclose(out.bands, 0.37, rtol=0, atol=1e-7)
        assert out.pixel_size_m == 10.0

    def test_ramp_matches_hand_evaluated_kernel(self):
        out = resample_bands(_scene([[0, 0], [1, 1]]), 10.0).bands[0]
        # target centers at source coordinates -0.25, 0.25, 0.75, 1.25
        expected = [-0.0703125, 0.203125, 0.796875, 1.0703125]
        np.testing.assert_allclose(out[:, 0], expected, atol=1e-7)
        np.testing.assert_array_equal(out[:, 0], out[:, 3])
        assert np.all(np.diff(out, axis=0) >= 0)

    def test_matches_scalar_oracle_on_random_grid(self):
        rng = np.random.default_rng(3)
        grid = rng.random((5, 7))
        out = resample_bands(_scene(grid), 10.0).bands[0].astype(np.float64)
        xs = (np.arange(10) + 0.5) / 2 - 0.5
        ys = (np.arange(14) + 0.5) / 2 - 0.5
        cols = np.array([[_keys_1d(row, y) for y in ys] for row in grid])  # (5, 14)
        oracle = np.array([[_keys_1d(cols[:, j], x) for j in range(14)] for x in xs])
        np.testing.assert_allclose(out, oracle, atol=1e-6)

    def test_identity_is_bitwise(self):
        rng = np.random.default_rng(0)
        s = _scene(rng.random((2, 8, 8)), pixel=10.0, gt=(0, 10, 0, 0, 0, -10))
        out = resample_bands(s, 10.0)
        assert np.array_equal(out.bands, s.bands)
        assert out.bands is not s.bands

    def test_geotransform_scaled(self):
        out = resample_bands(_scene(np.zeros((4, 4))), 10.0)
        assert out.geotransform == (500000.0, 10.0, 0.0, 5200000.0, 0.0, -10.0)

    def test_rejects_missing_georeference(self):
        with pytest.raises(ValueError, match="not georeferenced"):
            resample_bands(_scene(np.zeros((4, 4)), gt=None), 10.0)

    def test_rejects_non_integer_ratio(self):
        with pytest.raises(ValueError, match="integer multiples"):
            resample_bands(_scene(np.zeros((4, 4)), pixel=15.0), 10.0)

    def test_kernel_interpolates(self):
        assert keys_kernel(0.0) == 1.0
        np.testing.assert_allclose(keys_kernel(np.array([1.0, 2.0, -1.0, 2.5])), 0.0)

    def test_merge_resolution_groups(self):
        ten = _scene(np.ones((2, 8, 8)), pixel=10.0, gt=(0, 10, 0, 0, 0, -10), names=["B02", "B03"])
        twenty = _scene(np.full((1, 4, 4), 2.0), pixel=20.0, gt=(0, 20, 0, 0, 0, -20), names=["B05"])
        sixty = Scene("s", np.full((1, 2, 2), 3.0, np.float32), ["B01"], 60.0, (0, 60, 0, 0, 0, -60))
        with pytest.raises(ValueError):
            merge_resolution_groups([ten, sixty])
        merged = merge_resolution_groups([ten, twenty])
        assert merged.band_names == ["B02", "B03", "B05"]
        assert merged.bands.shape == (3, 8, 8)
        np.testing.assert_allclose(merged.bands[2], 2.0, atol=1e-6)


class TestNormalize:
    def test_min_max_per_crop(self):
        pts = [YieldPoint("s", 0, i, y, CropType.MAIZE) for i, y in enumerate([2.0, 4.0, 6.0])]
        out, report = normalize_yields(pts)
        assert [p.yield_norm for p in out] == [0.0, 0.5, 1.0]
        assert report.constants[CropType.MAIZE] == (2.0, 6.0)
        assert report.denormalize(CropType.MAIZE, 0.5) == 4.0

    def test_single_point_is_half(self):
        out, report = normalize_yields([YieldPoint("s", 0, 0, 3.3, CropType.SOYBEAN)])
        assert out[0].yield_norm == 0.5
        assert report.degenerate == [CropType.SOYBEAN]

    def test_crops_independent(self):
        pts = [
            YieldPoint("s", 0, 0, 1.0, CropType.RICE),
            YieldPoint("s", 0, 1, 10.0, CropType.MAIZE),
            YieldPoint("s", 0, 2, 2.0, CropType.RICE),
            YieldPoint("s", 0, 3, 20.0, CropType.MAIZE),
        ]
        out, _ = normalize_yields(pts)
        assert [p.yield_norm for p in out] == [0.0, 0.0, 1.0, 1.0]

    def test_empty(self):
        out, report = normalize_yields([])
        assert out == [] and report.constants == {}

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
    def test_idempotent_on_unit_range(self, vals):
        vals = [0.0, 1.0] + vals
        pts = [YieldPoint("s", 0, i, v, CropType.RICE) for i, v in enumerate(vals)]
        out, _ = normalize_yields(pts)
        assert [p.yield_norm for p in out] == vals


class TestRasterize:
    def test_empty(self):
        values, labeled, report = rasterize_points([], 32, 32)
        assert not labeled.any() and report.placed == 0

    def test_single(self):
        p = YieldPoint("s", 10, 20, 1.0, 0, yield_norm=0.7)
        values, labeled, _ = rasterize_points([p], 32, 32)
        assert labeled.sum() == 1 and labeled[10, 20]
        assert values[10, 20] == np.float32(0.7)

    def test_collision_average(self):
        pts = [YieldPoint("s", 3, 3, 1.0, 0, yield_norm=v) for v in (0.4, 0.8)]
        values, labeled, report = rasterize_points(pts, 8, 8)
        assert labeled.sum() == 1
        assert values[3, 3] == pytest.approx(0.6)
        assert report.collisions == 1

    def test_outside_skipped_and_counted(self, caplog):
        pts = [YieldPoint("s", 8, 0, 1.0, 0, yield_norm=0.5), YieldPoint("s", 0, -1, 1.0, 0, yield_norm=0.5)]
        values, labeled, report = rasterize_points(pts, 8, 8)
        assert not labeled.any()
        assert report.skipped == 2
        assert "outside" in caplog.text


class TestTilePlan:
    def test_exact_fit(self):
        assert tile_plan(256, 256) == [(0, 0)]

    def test_512(self):
        plan = tile_plan(512, 512)
        assert sorted({r for r, _ in plan}) == [0, 230, 256]
        assert len(plan) == 9

    def test_clamped_last(self):
        plan = tile_plan(300, 256)
        assert plan == [(0, 0), (0, 44)]

    def test_too_small(self):
        with pytest.raises(ValueError, match="pad"):
            tile_plan(255, 300)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(256, 1024), st.integers(256, 1024))
    def test_covers_every_pixel(self, w, h):
        cover = np.zeros((h, w), dtype=np.int32)
        for r, c in tile_plan(w, h):
            assert 0 <= r <= h - 256 and 0 <= c <= w - 256
            cover[r : r + 256, c : c + 256] += 1
        assert cover.min() >= 1


def test_rasterized_points_align_with_tiles():
    rng = np.random.default_rng(1)
    h, w = 300, 520
    scene = Scene("a", rng.random((2, h, w)).astype(np.float32), ["B02", "B03"], 10.0, (0, 10, 0, 0, 0, -10))
    pts = [YieldPoint("a", int(r), int(c), 1.0, 0, yield_norm=float(v))
           for r, c, v in zip(rng.integers(0, h, 30), rng.integers(0, w, 30), rng.random(30))]
    values, labeled, _ = rasterize_points(pts, h, w)
    tiles = make_tiles(scene, np.zeros((h, w), np.uint8), values, labeled)
    for t in tiles:
        r0, c0 = t.origin
        inside = {(p.row - r0, p.col - c0) for p in pts if r0 <= p.row < r0 + 256 and c0 <= p.col < c0 + 256}
        assert set(zip(*np.nonzero(t.yield_labeled))) == inside
        for r, c in inside:
            assert t.yield_values[r, c] == values[r + r0, c + c0]
        assert np.array_equal(t.bands, scene.bands[:, r0 : r0 + 256, c0 : c0 + 256])
    assert tiles[0].id == "a:0:0"


class TestFolds:
    def test_balanced(self):
        plan = make_folds([f"t{i}" for i in range(20)], k=10, seed=4)
        for f in range(10):
            assert len(plan.validation_ids(f)) == 2
            assert len(plan.training_ids(f)) == 18

    def test_deterministic(self):
        ids = [f"t{i}" for i in range(37)]
        a, b = make_folds(ids, 10, 7), make_folds(ids, 10, 7)
        assert list(a.assignments.items()) == list(b.assignments.items())
        assert make_folds(ids, 10, 8).assignments != a.assignments

    @given(st.integers(2, 12), st.integers(0, 40), st.integers(0, 2**31))
    def test_partition(self, k, extra, seed):
        ids = [f"t{i}" for i in range(k + extra)]
        plan = make_folds(ids, k, seed)
        vals = [set(plan.validation_ids(f)) for f in range(k)]
        assert set().union(*vals) == set(ids)
        assert sum(len(v) for v in vals) == len(ids)
        sizes = [len(v) for v in vals]
        assert max(sizes) - min(sizes) <= 1

    def test_errors(self):
        with pytest.raises(ValueError):
            make_folds(["a", "b"], k=3)
        with pytest.raises(ValueError):
            make_folds(["a", "b"], k=1)


class TestSelectBands:
    def _l1c(self):
        return Scene("s", np.arange(13, dtype=np.float32)[:, None, None] * np.ones((13, 4, 4), np.float32),
                     list(L1C_BANDS), 10.0, (0, 10, 0, 0, 0, -10), level="L1C")

    def test_four_band_config(self):
        out = select_bands(self._l1c(), ["B02", "B03", "B04", "B08"])
        assert out.bands.shape[0] == 4

    def test_identity(self):
        s = self._l1c()
        out = select_bands(s, list(L1C_BANDS))
        assert np.array_equal(out.bands, s.bands) and out.band_names == s.band_names

    def test_order_as_requested(self):
        out = select_bands(self._l1c(), ["B08", "B02", "B03"])
        assert out.band_names == ["B08", "B02", "B03"]
        assert [float(out.bands[i, 0, 0]) for i in range(3)] == [7.0, 1.0, 2.0]

    def test_unknown_band(self):
        with pytest.raises(ValueError, match="available"):
            select_bands(self._l1c(), ["B99"])
