from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from terranet.evaluation import (
    NODATA,
    TerrainRaster,
    compute_metrics,
    rasterize_dsm,
    rasterize_values,
    read_ascii_grid,
    read_ppm,
    write_ascii_grid,
    write_ppm,
    write_sweep_csv,
)
from terranet.pointcloud import PointCloud


def cloud_from(xyz):
    xyz = np.asarray(xyz, float)
    return PointCloud.from_raw(xyz, np.full((len(xyz), 3), 0.5), xyz[:, 2])


class TestMetrics:
    def test_perfect(self):
        m = compute_metrics([1, 2, 3], [1, 2, 3], 3.0)
        assert (m.mae, m.sigma, m.relative_error, m.n) == (0.0, 0.0, 0.0, 3)

    def test_hand_values(self):
        m = compute_metrics([0, 0, 0, 0], [1, -1, 3, -3], 4.0)
        assert m.mae == 2.0
        assert m.sigma == 1.0  # population std of |e| = (1, 1, 3, 3)
        assert m.relative_error == 0.5

    def test_errors(self):
        with pytest.raises(ValueError):
            compute_metrics([1, 2], [1], 1.0)
        with pytest.raises(ValueError):
            compute_metrics([], [], 1.0)
        with pytest.raises(ValueError):
            compute_metrics([1], [1], 0.0)

    @given(hnp.arrays(np.float64, st.integers(1, 50), elements=st.floats(-100, 100)),
           st.floats(-5, 5))
    def test_constant_offset(self, truth, d):
        m = compute_metrics(truth, truth + d, 10.0)
        assert m.mae == pytest.approx(abs(d), abs=1e-9)
        assert m.sigma == pytest.approx(0.0, abs=1e-9)

    def test_json(self, tmp_path):
        m = compute_metrics([0.0, 1.0], [0.5, 1.0], 1.0)
        m.write_json(tmp_path / "m.json")
        assert json.loads((tmp_path / "m.json").read_text()) == {
            "mae": 0.25, "n": 2, "relative_error": 0.25, "sigma": 0.25
        }


class TestRaster:
    def test_north_up_orientation(self):
        c = cloud_from([[0.5, 0.5, 1.0], [0.5, 2.5, 7.0], [1.5, 0.5, 3.0]])
        r = rasterize_dsm(c, 1.0)
        assert (r.rows, r.cols) == (2, 1) or (r.rows, r.cols) == (2, 1)
        assert r.origin == (0.5, 0.5)
        # highest-y point lands in row 0
        assert r.values[0, 0] == 7.0
        assert r.values[-1, 0] == 3.0

    def test_cell_equals_span_is_one_cell(self):
        c = cloud_from([[0, 0, 1], [2, 2, 2]])
        r = rasterize_dsm(c, 2.0)
        assert (r.rows, r.cols) == (1, 1)
        assert r.values[0, 0] == 2.0

    def test_reducers_and_nodata(self):
        c = cloud_from([[0.1, 0.1, 1], [0.2, 0.2, 5], [3.9, 3.9, 2]])
        vals = np.array([1.0, 3.0, 10.0])
        mean = rasterize_values(c, vals, 1.0, "mean")
        assert mean.values[-1, 0] == 2.0
        assert rasterize_values(c, vals, 1.0, "min").values[-1, 0] == 1.0
        assert rasterize_values(c, vals, 1.0, "max").values[-1, 0] == 3.0
        assert (mean.values == NODATA).sum() == mean.rows * mean.cols - 2
        with pytest.raises(ValueError):
            rasterize_values(c, vals, 1.0, "median")

    def test_sample_matches_rasterized_cell(self):
        rng = np.random.default_rng(0)
        xyz = rng.uniform(0, 20, size=(300, 3))
        c = cloud_from(xyz)
        r = rasterize_dsm(c, 1.5)
        s = r.sample(xyz[:, 0], xyz[:, 1])
        assert np.all(s >= xyz[:, 2])

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.floats(0.1, 10), st.integers(0, 2**31))
    def test_ascii_round_trip(self, rows, cols, cs, seed):
        import tempfile, os
        rng = np.random.default_rng(seed)
        v = rng.normal(0, 100, size=(rows, cols))
        v[rng.uniform(size=v.shape) < 0.2] = NODATA
        r = TerrainRaster((float(rng.uniform(-1e5, 1e5)), float(rng.uniform(-1e5, 1e5))), cs, v)
        with tempfile.TemporaryDirectory() as d:
            p = os.path.join(d, "g.asc")
            write_ascii_grid(r, p)
            q = read_ascii_grid(p)
        assert q.values.shape == v.shape
        np.testing.assert_allclose(q.values, v, atol=1e-6, rtol=0)
        assert q.origin == pytest.approx(r.origin, abs=1e-6)
        assert q.cell_size == pytest.approx(cs, abs=1e-9)

    def test_ascii_shape_mismatch(self, tmp_path):
        p = tmp_path / "bad.asc"
        p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n")
        with pytest.raises(ValueError):
            read_ascii_grid(p)

    @pytest.mark.parametrize("color", [True, False])
    def test_ppm(self, tmp_path, color):
        v = np.array([[0.0, 1.0, NODATA], [2.0, 3.0, 4.0]])
        p = tmp_path / "x.ppm"
        write_ppm(TerrainRaster((0, 0), 1.0, v), p, color=color)
        img = read_ppm(p)
        assert img.shape == (2, 3, 3)
        np.testing.assert_array_equal(img[0, 2], 0)
        if not color:
            assert img[1, 2, 0] == 255 and img[0, 0, 0] == 0

    def test_ppm_leading_whitespace_pixels(self, tmp_path):
        # a first pixel value equal to an ASCII whitespace byte must survive
        v = np.array([[0.0, 10 / 255 * 100], [100.0, 50.0]])
        p = tmp_path / "w.ppm"
        write_ppm(TerrainRaster((0, 0), 1.0, v), p, color=False)
        assert read_ppm(p).shape == (2, 2, 3)


def test_sweep_csv(tmp_path):
    rows = [(5.0, compute_metrics([0.0], [1.0], 1.0)), (25.0, compute_metrics([0.0], [0.5], 1.0))]
    write_sweep_csv(rows, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "radius,mae,sigma,relative_error,n"
    assert lines[2].startswith("25.0,0.5,")
