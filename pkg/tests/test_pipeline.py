from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from terranet.net import NetConfig, NetParams, init_network, load_checkpoint
from terranet.pointcloud import PointCloud
from terranet.spatial import Block, partition_blocks
from terranet.pipeline import (
    FeatureBlock,
    SceneIndex,
    TrainConfig,
    augment,
    build_feature_block,
    infer_scene,
    lr_schedule,
    make_training_set,
    split_blocks,
    train,
)

TINY_NET = NetConfig([8, 8, 16], [8, 16], [16, 1])


def toy_cloud(w=20.0, h=20.0, n=800, seed=0, truth=None):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(0, w, n), rng.uniform(0, h, n)
    ground = 50 + 0.1 * x
    z = ground + np.where(rng.uniform(size=n) < 0.2, rng.uniform(1, 5, n), 0.0)
    gt = ground if truth is None else np.full(n, truth)
    return PointCloud.from_raw(np.column_stack([x, y, z]), rng.uniform(0, 1, (n, 3)), gt)


def small_config(**kw):
    base = dict(points_per_block=32, k=4, radius=3.0, batch_size=2, epochs=2,
                augmentation_copies=1, validation_fraction=0.25, seed=1)
    base.update(kw)
    return TrainConfig(**base)


class TestAugment:
    def test_identity(self):
        xyz = np.random.default_rng(0).normal(size=(20, 3))
        np.testing.assert_allclose(augment(xyz, 0.0, np.random.default_rng(0), 0, 0), xyz, rtol=0, atol=1e-12)

    def test_half_turn_negates_centered(self):
        xyz = np.random.default_rng(1).normal(size=(20, 3))
        out = augment(xyz, np.pi, np.random.default_rng(0), 0, 0)
        c = xyz.mean(axis=0)
        np.testing.assert_allclose(out[:, :2] - c[:2], -(xyz[:, :2] - c[:2]), atol=1e-12)
        np.testing.assert_array_equal(out[:, 2], xyz[:, 2])

    @settings(max_examples=40)
    @given(st.floats(0, 2 * np.pi, exclude_max=True), st.integers(0, 2**31))
    def test_isometry(self, angle, seed):
        xyz = np.random.default_rng(seed).uniform(-50, 50, size=(15, 3))
        out = augment(xyz, angle, np.random.default_rng(0), 0, 0)
        d0 = np.linalg.norm(xyz[:, None] - xyz[None], axis=-1)
        d1 = np.linalg.norm(out[:, None] - out[None], axis=-1)
        np.testing.assert_allclose(d1, d0, rtol=1e-6, atol=1e-9)

    def test_noise_zero_mean(self):
        n, sxy, sz = 10_000, 0.08, 0.04
        xyz = np.zeros((n, 3))
        out = augment(xyz, 0.0, np.random.default_rng(2), sxy, sz, center=np.zeros(3))
        m = out.mean(axis=0)
        assert abs(m[0]) < 3 * sxy / np.sqrt(n)
        assert abs(m[1]) < 3 * sxy / np.sqrt(n)
        assert abs(m[2]) < 3 * sz / np.sqrt(n)

    def test_angle_range(self):
        with pytest.raises(ValueError):
            augment(np.zeros((2, 3)), 2 * np.pi, np.random.default_rng(0), 0, 0)


class TestSchedule:
    def test_examples(self):
        assert lr_schedule(1e-3, 0, 20) == 1e-3
        assert lr_schedule(1e-3, 10, 20) == pytest.approx(5e-4)
        assert lr_schedule(1e-5, 7, 8) == 1e-5

    @given(st.floats(1e-6, 1.0), st.integers(1, 100), st.data())
    def test_monotone_and_floored(self, lr0, total, data):
        e = data.draw(st.integers(0, total - 1))
        v = lr_schedule(lr0, e, total)
        assert v >= 1e-5
        if e + 1 < total:
            assert lr_schedule(lr0, e + 1, total) <= v


class TestTrainingSet:
    def test_split_arithmetic(self):
        blocks = [Block((i, 0), (0, 0, 1, 1), np.array([i]), i) for i in range(8)]
        tr, va = split_blocks(blocks, 0.25, seed=3)
        assert len(va) == 2 and len(tr) == 6
        assert not {b.block_id for b in tr} & {b.block_id for b in va}

    def test_short_block_replacement(self):
        c = toy_cloud(n=400)
        block = Block((0, 0), (0, 0, 10, 10), np.arange(10), 0)
        fb = build_feature_block(SceneIndex.build(c), block, small_config(points_per_block=2048), 0)
        assert fb.points.shape == (2048, 10)
        assert set(fb.indices) <= set(range(10))
        assert len(np.unique(fb.indices)) <= 10

    def test_copies_count_and_disjoint(self):
        c = toy_cloud()
        cfg = small_config(augmentation_copies=2)
        n_blocks = len(partition_blocks(c, cfg.block_size, cfg.overlap))
        tr, va = make_training_set(c, cfg)
        assert len(tr) == 2 * (n_blocks - len(va))
        assert not {b.block_id for b in tr} & {b.block_id for b in va}
        assert all(b.neighborhoods.shape == (32, 4, 10) for b in tr + va)

    def test_no_unaugmented_sample(self):
        c = toy_cloud()
        cfg = small_config()
        index = SceneIndex.build(c)
        tr, _ = make_training_set(c, cfg, index)
        for fb in tr[:5]:
            # un-augmented centered coordinates would be exactly the centered raw xyz
            raw = c.xyz[fb.indices]
            assert not np.allclose(fb.points[:, :3], raw - raw.mean(axis=0), atol=1e-4)

    def test_augmentation_preserves_query_offsets_norm_up_to_noise(self):
        c = toy_cloud()
        index = SceneIndex.build(c)
        block = partition_blocks(c, 10.0, 0.5)[0]
        cfg = small_config(sigma_xy=0.0, sigma_z=0.0)
        a = build_feature_block(index, block, cfg, 5, augmented=True)
        b = build_feature_block(index, block, cfg, 5, augmented=False)
        np.testing.assert_array_equal(a.indices, b.indices)
        na = np.linalg.norm(a.neighborhoods[..., :3], axis=-1)
        nb = np.linalg.norm(b.neighborhoods[..., :3], axis=-1)
        np.testing.assert_allclose(na, nb, atol=1e-4)
        np.testing.assert_array_equal(a.points[:, 3:], b.points[:, 3:])

    def test_missing_truth(self):
        c = toy_cloud()
        c.gt_dtm = None
        with pytest.raises(ValueError):
            make_training_set(c, small_config())

    def test_degenerate_scene(self):
        c = toy_cloud(w=5, h=5, n=50)
        with pytest.raises(ValueError):
            make_training_set(c, small_config())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(overlap=1.0)
        with pytest.raises(ValueError):
            TrainConfig(k=0)


class TestTrain:
    def test_smoke_and_checkpoint(self, tmp_path):
        c = toy_cloud()
        cfg = small_config(epochs=2)
        tr, va = make_training_set(c, cfg)
        ck = tmp_path / "m.tnet"
        best, hist = train(tr[:2], va[:1], TINY_NET, cfg, checkpoint_path=ck)
        assert len(hist) == 2
        params, _, meta = load_checkpoint(ck)
        assert meta["val_loss"] == hist.best_val_loss
        for a, b in zip(best.arrays(), params.arrays()):
            np.testing.assert_array_equal(a, b)
        hist.write_csv(tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,lr,seconds"

    def test_constant_truth_loss_falls(self):
        c = toy_cloud(truth=57.0)
        c.gt_dtm = c.gt_dtm + 3.0  # truth well above the initial output
        cfg = small_config(epochs=5, lr0=1e-2)
        tr, va = make_training_set(c, cfg)
        _, hist = train(tr, va, TINY_NET, cfg)
        assert hist.records[-1].train_loss < hist.records[0].train_loss

    def test_deterministic(self, tmp_path):
        c = toy_cloud()
        cfg = small_config(epochs=2)
        out = []
        for i in range(2):
            tr, va = make_training_set(c, cfg)
            ck = tmp_path / f"{i}.tnet"
            _, hist = train(tr, va, TINY_NET, cfg, checkpoint_path=ck)
            out.append((ck.read_bytes(), [(r.train_loss, r.val_loss) for r in hist.records]))
        assert out[0] == out[1]

    def test_threads_match_serial(self):
        c = toy_cloud()
        a, _ = make_training_set(c, small_config(workers=1))
        b, _ = make_training_set(c, small_config(workers=3))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.points, y.points)
            np.testing.assert_array_equal(x.neighborhoods, y.neighborhoods)

    def test_empty_sets(self):
        with pytest.raises(ValueError):
            train([], [], TINY_NET, small_config())


class TestInference:
    def test_overlap_zero_single_prediction(self):
        c = toy_cloud()
        p = init_network(TINY_NET, 0)
        _, counts = infer_scene(c, p, small_config(overlap=0.0), return_counts=True)
        np.testing.assert_array_equal(counts, 1)

    def test_coverage_and_order(self):
        c = toy_cloud(w=33, h=17, n=600, seed=4)
        p = init_network(TINY_NET, 0)
        p.head[-1].biases[:] = 1.0
        pred, counts = infer_scene(c, p, small_config(), return_counts=True)
        assert pred.shape == (len(c),)
        assert counts.min() >= 1 and counts.max() <= 4
        assert np.all(np.isfinite(pred)) and np.all(pred >= c.datum_offset)

    def test_zero_network_returns_datum(self):
        c = toy_cloud()
        p = init_network(TINY_NET, 0)
        zero = NetParams(*[[type(l)(l.weights * 0, l.biases * 0) for l in br]
                           for br in (p.point, p.neighborhood, p.head)])
        pred = infer_scene(c, zero, small_config())
        np.testing.assert_array_equal(pred, c.datum_offset)

    def test_feature_block_validation(self):
        with pytest.raises(ValueError):
            FeatureBlock(np.zeros((3, 10)), np.zeros((2, 4, 10)), np.zeros(3), np.zeros(3), 0)
