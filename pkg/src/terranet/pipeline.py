"""Training-set construction, the training loop and whole-scene inference."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AdamState, NumericError, adam_step, logcosh_loss
from .net import NetConfig, NetParams, backward, forward, init_network, predict, save_checkpoint
from .pointcloud import PointCloud, build_feature_matrix, point_attributes
from .spatial import (
    Block,
    KdTree,
    NeighborhoodSpec,
    build_kdtree,
    derive_seed,
    neighborhood_features,
    partition_blocks,
    sample_radius_neighbors,
)

log = logging.getLogger(__name__)

LR_FLOOR = 1e-5


@dataclass
class TrainConfig:
    block_size: float = 10.0
    overlap: float = 0.5
    points_per_block: int = 2048
    k: int = 128
    radius: float = 25.0
    batch_size: int = 12
    epochs: int = 20
    lr0: float = 0.001
    sigma_xy: float = 0.08
    sigma_z: float = 0.04
    validation_fraction: float = 0.1
    augmentation_copies: int = 4
    seed: int = 0
    workers: int = 1
    inference_chunk: int = 4096

    def __post_init__(self):
        positive = ("block_size", "points_per_block", "k", "radius", "batch_size", "epochs",
                    "lr0", "augmentation_copies", "workers", "inference_chunk")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sigma_xy < 0 or self.sigma_z < 0:
            raise ValueError("augmentation noise must be >= 0")
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must be in [0, 1), got {self.overlap}")
        if not 0 < self.validation_fraction <= 0.5:
            raise ValueError(f"validation_fraction must be in (0, 0.5], got {self.validation_fraction}")

    @property
    def neighborhood(self) -> NeighborhoodSpec:
        return NeighborhoodSpec(self.radius, self.k)


@dataclass
class FeatureBlock:
    points: np.ndarray  # (N, 10) float32
    neighborhoods: np.ndarray  # (N, K, 10) float32
    truth: np.ndarray  # (N,) float32, datum-shifted metres
    indices: np.ndarray  # (N,) source point indices
    block_id: int

    def __post_init__(self):
        n = len(self.points)
        if self.neighborhoods.shape[0] != n or len(self.truth) != n or len(self.indices) != n:
            raise ValueError("feature block arrays disagree on N")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best_val_loss(self) -> float:
        return min(r.val_loss for r in self.records)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "lr", "seconds"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), f"{r.seconds:.3f}"])


# ---------------------------------------------------------------------------
# augmentation and block construction


def augment(xyz: np.ndarray, angle: float, rng: np.random.Generator, sigma_xy: float,
            sigma_z: float, center=None) -> np.ndarray:
    """Rotate x, y about the vertical axis through ``center`` (default: the
    centroid), then add zero-mean Gaussian noise per axis."""
    if not 0 <= angle < 2 * np.pi:
        raise ValueError(f"angle must be in [0, 2pi), got {angle}")
    xyz = np.asarray(xyz, dtype=np.float64)
    c = xyz.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    cos, sin = np.cos(angle), np.sin(angle)
    dx = xyz[:, 0] - c[0]
    dy = xyz[:, 1] - c[1]
    out = xyz.copy()
    out[:, 0] = c[0] + cos * dx - sin * dy
    out[:, 1] = c[1] + sin * dx + cos * dy
    if sigma_xy > 0:
        out[:, :2] += rng.normal(0.0, sigma_xy, size=(len(out), 2))
    if sigma_z > 0:
        out[:, 2] += rng.normal(0.0, sigma_z, size=len(out))
    return out


@dataclass
class SceneIndex:
    """Per-cloud lookups shared by every block: the KD-tree and the
    block-independent feature channels."""

    cloud: PointCloud
    tree: KdTree
    attributes: np.ndarray

    @classmethod
    def build(cls, cloud: PointCloud) -> "SceneIndex":
        return cls(cloud, build_kdtree(cloud, dims=3), point_attributes(cloud))


def build_feature_block(index: SceneIndex, block: Block, config: TrainConfig, seed: int,
                        augmented: bool = True) -> FeatureBlock:
    """Sample N points of ``block`` (with replacement if it is short), their
    K-neighborhoods and, optionally, one random rotation + noise."""
    cloud = index.cloud
    rng = np.random.default_rng(seed)
    n = config.points_per_block
    sel = rng.choice(block.indices, size=n, replace=len(block.indices) < n)
    nbr, _ = sample_radius_neighbors(index.tree, cloud.xyz[sel], config.neighborhood,
                                     int(rng.integers(0, 2**32)))
    p_xyz = cloud.xyz[sel]
    q_xyz = cloud.xyz[nbr]
    if augmented:
        angle = rng.uniform(0.0, 2 * np.pi)
        stacked = np.concatenate([p_xyz, q_xyz.reshape(-1, 3)])
        moved = augment(stacked, angle, rng, config.sigma_xy, config.sigma_z,
                        center=p_xyz.mean(axis=0))
        p_xyz = moved[:n]
        q_xyz = moved[n:].reshape(q_xyz.shape)
    points = build_feature_matrix(cloud, sel, xyz=p_xyz, attributes=index.attributes)
    nbrs = neighborhood_features(cloud, p_xyz, nbr, index.attributes, nbr_xyz=q_xyz)
    return FeatureBlock(
        points.astype(np.float32),
        nbrs.astype(np.float32),
        cloud.gt_dtm[sel].astype(np.float32),
        sel,
        block.block_id,
    )


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def split_blocks(blocks: list[Block], fraction: float, seed: int) -> tuple[list[Block], list[Block]]:
    """Hold out ``round(fraction * len)`` blocks (at least one) for validation."""
    n_val = max(1, int(round(fraction * len(blocks))))
    perm = np.random.default_rng([seed, 11]).permutation(len(blocks))
    val_pos = set(perm[:n_val].tolist())
    train = [b for i, b in enumerate(blocks) if i not in val_pos]
    val = [b for i, b in enumerate(blocks) if i in val_pos]
    return train, val


def make_training_set(cloud: PointCloud, config: TrainConfig,
                      index: SceneIndex | None = None) -> tuple[list[FeatureBlock], list[FeatureBlock]]:
    """Augmented training and validation blocks.

    Validation blocks are chosen by block id before augmentation and get their
    own augmentation draw; no un-augmented block is emitted.
    """
    if not cloud.has_truth:
        raise ValueError("training cloud needs gt_dtm on every point")
    blocks = partition_blocks(cloud, config.block_size, config.overlap)
    if len(blocks) < 2:
        raise ValueError("scene too small: need at least two blocks to hold out validation")
    index = index or SceneIndex.build(cloud)
    train_blocks, val_blocks = split_blocks(blocks, config.validation_fraction, config.seed)

    jobs = [(b, derive_seed(config.seed, b.block_id, c, 0))
            for b in train_blocks for c in range(config.augmentation_copies)]
    val_jobs = [(b, derive_seed(config.seed, b.block_id, 0, 1)) for b in val_blocks]

    def job(item):
        return build_feature_block(index, item[0], config, item[1], augmented=True)

    t0 = time.perf_counter()
    train = _map(job, jobs, config.workers)
    val = _map(job, val_jobs, config.workers)
    log.info("built %d training / %d validation blocks in %.1fs",
             len(train), len(val), time.perf_counter() - t0)
    return train, val


# ---------------------------------------------------------------------------
# training


def lr_schedule(lr0: float, epoch: int, total_epochs: int) -> float:
    """Linear decay by epoch, floored at 1e-5."""
    return max(lr0 * (1.0 - epoch / total_epochs), LR_FLOOR)


def _stack(blocks: list[FeatureBlock]):
    return (
        np.stack([b.points for b in blocks]),
        np.stack([b.neighborhoods for b in blocks]),
        np.stack([b.truth for b in blocks]),
    )


def evaluate_loss(params: NetParams, blocks: list[FeatureBlock], batch_size: int) -> float:
    """Mean per-point log-cosh loss."""
    total = 0.0
    count = 0
    for s in range(0, len(blocks), batch_size):
        X, G, y = _stack(blocks[s : s + batch_size])
        pred = predict(params, X, G)
        loss, _ = logcosh_loss(y.astype(np.float64), pred.astype(np.float64))
        total += loss
        count += y.size
    return total / count


def initial_params(net_config: NetConfig, train_set: list[FeatureBlock], seed: int) -> NetParams:
    """Initialized network with the output bias set to the mean training truth."""
    params = init_network(net_config, seed, np.float32)
    mean_truth = float(np.mean([b.truth.mean() for b in train_set]))
    params.head[-1].biases[:] = mean_truth
    return params


def train(train_set: list[FeatureBlock], val_set: list[FeatureBlock], net_config: NetConfig,
          config: TrainConfig, checkpoint_path=None,
          metadata: dict | None = None) -> tuple[NetParams, TrainHistory]:
    """Minibatch Adam on the summed log-cosh loss; keeps the best-validation weights."""
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    params = initial_params(net_config, train_set, config.seed)
    state = AdamState.zeros_like(params.arrays())
    rng = np.random.default_rng([config.seed, 21])
    history = TrainHistory()
    best, best_val = params.copy(), np.inf

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(config.lr0, epoch, config.epochs)
        order = rng.permutation(len(train_set))
        total, count = 0.0, 0
        for bi, s in enumerate(range(0, len(order), config.batch_size)):
            X, G, y = _stack([train_set[i] for i in order[s : s + config.batch_size]])
            pred, cache = forward(params, X, G)
            try:
                loss, grad = logcosh_loss(y, pred)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {bi}: {exc}") from None
            grads = backward(params, cache, (grad / len(X)).astype(np.float32))
            try:
                adam_step(params.arrays(), grads.arrays(), state, lr)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} batch {bi}: {exc}") from None
            total += loss
            count += y.size
        train_loss = total / count
        val_loss = evaluate_loss(params, val_set, config.batch_size)
        if not np.isfinite(val_loss):
            raise NumericError(f"epoch {epoch}: non-finite validation loss")
        rec = EpochRecord(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
        history.records.append(rec)
        log.info("epoch %d  train %.4f  val %.4f  lr %.2e  %.1fs",
                 epoch, train_loss, val_loss, lr, rec.seconds)
        if val_loss < best_val:
            best_val = val_loss
            best = params.copy()
            if checkpoint_path is not None:
                meta = dict(metadata or {})
                meta.update(epoch=epoch, val_loss=val_loss, train_loss=train_loss)
                save_checkpoint(checkpoint_path, best, net_config, meta)
    return best, history


# ---------------------------------------------------------------------------
# inference


def inference_block(index: SceneIndex, block: Block, config: TrainConfig, seed: int):
    """All points of a block (no sampling, no augmentation) and their neighborhoods."""
    cloud = index.cloud
    idx = block.indices
    nbr, _ = sample_radius_neighbors(index.tree, cloud.xyz[idx], config.neighborhood, seed)
    points = build_feature_matrix(cloud, idx, attributes=index.attributes)
    nbrs = neighborhood_features(cloud, cloud.xyz[idx], nbr, index.attributes)
    return points.astype(np.float32), nbrs.astype(np.float32)


def infer_scene(cloud: PointCloud, params: NetParams, config: TrainConfig,
                index: SceneIndex | None = None, return_counts: bool = False):
    """Per-point DTM in raw (datum-restored) metres, averaging overlapping blocks."""
    index = index or SceneIndex.build(cloud)
    blocks = partition_blocks(cloud, config.block_size, config.overlap)
    dtype = params.dtype

    def job(block):
        pts, nbrs = inference_block(index, block, config, derive_seed(config.seed, block.block_id, 0, 2))
        return predict(params, pts.astype(dtype), nbrs.astype(dtype), config.inference_chunk)

    preds = _map(job, blocks, config.workers)
    acc = np.zeros(len(cloud))
    counts = np.zeros(len(cloud), dtype=np.int64)
    for block, p in zip(blocks, preds):
        np.add.at(acc, block.indices, p.astype(np.float64))
        np.add.at(counts, block.indices, 1)
    if np.any(counts == 0):
        raise RuntimeError("some points were not covered by any block")
    out = acc / counts + cloud.datum_offset
    return (out, counts) if return_counts else out
