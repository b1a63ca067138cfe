from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terranet.pointcloud import ndvi
from terranet.synth import (
    BUILDING,
    GROUND,
    VEGETATION,
    SynthConfig,
    gen_scene,
    gen_split,
    generate_scene,
    terrain_function,
)

SMALL = dict(extent=(60.0, 50.0), building_count=3, tree_count=5, building_footprint=(5.0, 10.0))


def test_flat_no_objects():
    c = gen_scene(SynthConfig(extent=(30, 30), terrain_amplitude=0, building_count=0, tree_count=0))
    assert np.all(c.gt_dtm == c.gt_dtm[0])


def test_deterministic():
    a = gen_scene(SynthConfig(seed=3, **SMALL))
    b = gen_scene(SynthConfig(seed=3, **SMALL))
    np.testing.assert_array_equal(a.xyz, b.xyz)
    np.testing.assert_array_equal(a.spectral, b.spectral)
    c = gen_scene(SynthConfig(seed=4, **SMALL))
    assert a.xyz.shape != c.xyz.shape or not np.array_equal(a.xyz, c.xyz)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_truth_is_terrain(seed):
    cfg = SynthConfig(seed=seed, **SMALL)
    scene = generate_scene(cfg)
    raw = scene.cloud.raw_xyz()
    np.testing.assert_allclose(scene.cloud.raw_gt(), scene.terrain(raw[:, 0], raw[:, 1]), atol=1e-9)
    above = scene.cloud.labels != GROUND
    assert np.all(raw[above, 2] >= scene.cloud.raw_gt()[above] - 3 * cfg.sensor_noise - 1e-9)
    base = scene.terrain.base
    assert np.all(np.abs(scene.cloud.raw_gt() - base) <= scene.terrain.bound + 1e-9)


def test_density():
    cfg = SynthConfig(seed=1, **SMALL)
    c = gen_scene(cfg)
    area = cfg.extent[0] * cfg.extent[1]
    assert abs(len(c) / area - cfg.density) <= 0.1 * cfg.density


def test_class_spectra():
    c = gen_scene(SynthConfig(seed=2, **SMALL))
    nd = ndvi(c.spectral[:, 0], c.spectral[:, 1])
    veg = nd[c.labels == VEGETATION]
    assert veg.mean() > 0.3
    assert veg.mean() > nd[c.labels == BUILDING].mean()
    assert abs(nd[c.labels == GROUND].mean()) < 0.1
    assert np.all((c.spectral >= 0) & (c.spectral <= 1))


def test_split_balanced_at_uniform_density():
    cfg = SynthConfig(seed=5, extent=(60.0, 50.0), building_count=0, tree_count=4)
    left, right = gen_split(cfg)
    assert abs(len(left) - len(right)) <= 0.05 * max(len(left), len(right))


def test_split():
    cfg = SynthConfig(seed=5, **SMALL)
    full = gen_scene(cfg)
    left, right = gen_split(cfg)
    assert len(left) + len(right) == len(full)
    mid = cfg.extent[0] / 2
    assert left.xyz[:, 0].max() < mid <= right.xyz[:, 0].min()
    both = np.vstack([left.xyz, right.xyz])
    assert len(np.unique(both, axis=0)) == len(np.unique(full.xyz, axis=0))
    # the halves share datum and scene box
    assert left.datum_offset == right.datum_offset == full.datum_offset
    np.testing.assert_array_equal(left.extent[1], right.extent[1])


def test_terrain_bound():
    t = terrain_function(SynthConfig(seed=0))
    x, y = np.meshgrid(np.linspace(0, 200, 50), np.linspace(0, 200, 50))
    assert np.all(np.abs(t(x, y) - t.base) <= t.bound)


@pytest.mark.parametrize(
    "kw",
    [dict(extent=(0, 10)), dict(density=0), dict(terrain_amplitude=-1), dict(building_count=-1)],
)
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        SynthConfig(**kw)


def test_objects_must_fit():
    with pytest.raises(ValueError):
        gen_scene(SynthConfig(extent=(10, 10), building_footprint=(20, 30), building_count=1))
    with pytest.raises(ValueError):
        gen_scene(SynthConfig(extent=(30, 30), building_footprint=(12, 14), building_count=40))
