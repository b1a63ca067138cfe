from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from terranet.baseline import MorphConfig, grayscale_opening, tophat_dtm
from terranet.evaluation import NODATA, TerrainRaster


def raster(v):
    return TerrainRaster((0.0, 0.0), 1.0, np.asarray(v, dtype=float))


def brute_opening(v, valid, r):
    rows, cols = v.shape
    ero = np.full(v.shape, np.inf)
    for i in range(rows):
        for j in range(cols):
            win = v[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            ok = valid[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            ero[i, j] = win[ok].min() if ok.any() else np.inf
    dil = np.full(v.shape, -np.inf)
    for i in range(rows):
        for j in range(cols):
            win = ero[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            ok = valid[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            dil[i, j] = win[ok].max() if ok.any() else -np.inf
    return np.where(valid, dil, NODATA)


grids = hnp.arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)), elements=st.floats(0, 50))


class TestOpening:
    def test_removes_narrow_peak(self):
        v = np.zeros((7, 7))
        v[3, 3] = 10
        out = grayscale_opening(raster(v), 1)
        np.testing.assert_array_equal(out.values, 0)

    def test_keeps_wide_plateau(self):
        v = np.zeros((9, 9))
        v[2:7, 2:7] = 5
        out = grayscale_opening(raster(v), 1)
        np.testing.assert_array_equal(out.values, v)

    @settings(max_examples=40, deadline=None)
    @given(grids, st.integers(1, 3), st.integers(0, 2**31))
    def test_matches_brute_force_and_properties(self, v, r, seed):
        mask = np.random.default_rng(seed).uniform(size=v.shape) < 0.15
        if mask.all():
            mask[0, 0] = False
        v = np.where(mask, NODATA, v)
        ras = raster(v)
        once = grayscale_opening(ras, r)
        np.testing.assert_allclose(once.values, brute_opening(v, ~mask, r))
        twice = grayscale_opening(once, r)
        np.testing.assert_array_equal(twice.values, once.values)  # idempotent
        assert np.all(once.values[~mask] <= v[~mask])  # anti-extensive

    def test_all_nodata(self):
        with pytest.raises(ValueError):
            grayscale_opening(raster(np.full((3, 3), NODATA)), 1)


class TestTophat:
    def test_building_removed_on_flat_ground(self):
        v = np.full((30, 30), 100.0)
        v[10:16, 12:18] = 112.0
        mask, dtm = tophat_dtm(raster(v), MorphConfig(window_radius=5))
        np.testing.assert_allclose(dtm.values, 100.0)
        assert mask.values[12, 14] == 0 and mask.values[0, 0] == 1

    def test_nearest_fill_tie_break(self):
        v = np.array([[1.0, 9.0, 3.0]])
        mask, dtm = tophat_dtm(raster(v), MorphConfig(window_radius=1, height_threshold=0.5))
        assert mask.values.tolist() == [[1.0, 0.0, 1.0]]
        # equidistant ground cells: the first in row-major order wins
        assert dtm.values[0, 1] == 1.0

    @settings(max_examples=30, deadline=None)
    @given(grids, st.integers(1, 3))
    def test_dtm_below_dsm(self, v, r):
        try:
            mask, dtm = tophat_dtm(raster(v), MorphConfig(window_radius=r))
        except ValueError:
            return
        assert np.all(dtm.values <= v)
        assert set(np.unique(mask.values)) <= {0.0, 1.0}

    def test_nodata_preserved(self):
        v = np.full((5, 5), 3.0)
        v[2, 2] = NODATA
        mask, dtm = tophat_dtm(raster(v), MorphConfig(window_radius=1))
        assert dtm.values[2, 2] == NODATA and mask.values[2, 2] == NODATA

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MorphConfig(window_radius=0)
        with pytest.raises(ValueError):
            MorphConfig(fill="idw")
