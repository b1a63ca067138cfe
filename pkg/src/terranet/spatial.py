"""KD-tree radius search, fixed-K neighbor sampling and overlapping block tiling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .pointcloud import PointCloud, point_attributes

_STACK = 256


@dataclass(frozen=True)
class NeighborhoodSpec:
    radius: float
    k: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")


@dataclass
class KdTree:
    """Array-backed KD-tree.

    Leaves own the contiguous range ``order[start:end]``; internal nodes keep
    their split and both children. Every node stores its bounding box, which
    is what the queries prune on.
    """

    keys: np.ndarray  # (n, d) float64
    order: np.ndarray  # permutation of point indices
    split_axis: np.ndarray  # -1 for leaves
    split_value: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    end: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray
    leaf_size: int
    sorted_keys: np.ndarray | None = None  # keys[order], contiguous per leaf

    def __post_init__(self):
        if self.sorted_keys is None:
            self.sorted_keys = np.ascontiguousarray(self.keys[self.order])

    @property
    def n_points(self) -> int:
        return len(self.keys)

    @property
    def dims(self) -> int:
        return self.keys.shape[1]

    def leaves(self) -> list[np.ndarray]:
        return [
            self.order[self.start[i] : self.end[i]]
            for i in range(len(self.split_axis))
            if self.split_axis[i] < 0
        ]

    def depth(self) -> int:
        best = 0
        stack = [(0, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if self.split_axis[node] >= 0:
                stack.append((self.left[node], d + 1))
                stack.append((self.right[node], d + 1))
        return best


def build_kdtree(points, dims: int = 3, leaf_size: int = 16) -> KdTree:
    """Median-split KD-tree over the first ``dims`` coordinates.

    The split axis is the widest box side (lowest axis on ties); points are
    ordered by (coordinate, index) so the build is deterministic.
    """
    xyz = points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if xyz.ndim != 2 or len(xyz) == 0:
        raise ValueError("cannot build a KD-tree over an empty point set")
    if dims not in (2, 3) or dims > xyz.shape[1]:
        raise ValueError(f"dims must be 2 or 3, got {dims}")
    keys = np.ascontiguousarray(xyz[:, :dims], dtype=np.float64)
    n = len(keys)
    order = np.arange(n, dtype=np.int64)
    axis_l, value_l, left_l, right_l, start_l, end_l, lo_l, hi_l = ([] for _ in range(8))

    def new_node(s, e):
        seg = keys[order[s:e]]
        axis_l.append(-1)
        value_l.append(0.0)
        left_l.append(-1)
        right_l.append(-1)
        start_l.append(s)
        end_l.append(e)
        lo_l.append(seg.min(axis=0))
        hi_l.append(seg.max(axis=0))
        return len(axis_l) - 1

    stack = [new_node(0, n)]
    while stack:
        node = stack.pop()
        s, e = start_l[node], end_l[node]
        if e - s <= leaf_size:
            continue
        span = hi_l[node] - lo_l[node]
        axis = int(np.argmax(span))
        if span[axis] == 0.0:
            continue  # all coincident: keep as an oversized leaf
        seg = order[s:e]
        seg = seg[np.lexsort((seg, keys[seg, axis]))]
        order[s:e] = seg
        mid = s + (e - s) // 2
        axis_l[node] = axis
        value_l[node] = float(keys[order[mid], axis])
        left_l[node] = new_node(s, mid)
        right_l[node] = new_node(mid, e)
        stack.append(right_l[node])
        stack.append(left_l[node])

    return KdTree(
        keys=keys,
        order=order,
        split_axis=np.array(axis_l, dtype=np.int64),
        split_value=np.array(value_l, dtype=np.float64),
        left=np.array(left_l, dtype=np.int64),
        right=np.array(right_l, dtype=np.int64),
        start=np.array(start_l, dtype=np.int64),
        end=np.array(end_l, dtype=np.int64),
        box_lo=np.array(lo_l, dtype=np.float64),
        box_hi=np.array(hi_l, dtype=np.float64),
        leaf_size=leaf_size,
    )


@numba.njit(cache=True, nogil=True)
def _box_dist2(lo, hi, c):
    d2 = 0.0
    for a in range(c.shape[0]):
        if c[a] < lo[a]:
            t = lo[a] - c[a]
            d2 += t * t
        elif c[a] > hi[a]:
            t = c[a] - hi[a]
            d2 += t * t
    return d2


@numba.njit(cache=True, nogil=True)
def _box_maxdist2(lo, hi, c):
    d2 = 0.0
    for a in range(c.shape[0]):
        t = max(c[a] - lo[a], hi[a] - c[a])
        d2 += t * t
    return d2


@numba.njit(cache=True, nogil=True)
def _radius_collect(skeys, order, split_axis, left, right, start, end, box_lo, box_hi, c, r2, out):
    stack = np.empty(_STACK, dtype=np.int64)
    stack[0] = 0
    top = 1
    count = 0
    d = skeys.shape[1]
    while top > 0:
        top -= 1
        node = stack[top]
        if _box_dist2(box_lo[node], box_hi[node], c) > r2:
            continue
        if _box_maxdist2(box_lo[node], box_hi[node], c) <= r2:
            for j in range(start[node], end[node]):
                out[count] = order[j]
                count += 1
        elif split_axis[node] < 0:
            for j in range(start[node], end[node]):
                d2 = 0.0
                for a in range(d):
                    t = skeys[j, a] - c[a]
                    d2 += t * t
                if d2 <= r2:
                    out[count] = order[j]
                    count += 1
        else:
            stack[top] = right[node]
            stack[top + 1] = left[node]
            top += 2
    return count


@numba.njit(cache=True, nogil=True)
def _skip(k, w):
    # Algorithm L: number of stream items to pass over before the next replacement
    return int(np.floor(np.log(np.random.random()) / np.log(1.0 - w)))


@numba.njit(cache=True, nogil=True)
def _sample_ball(skeys, order, split_axis, left, right, start, end, box_lo, box_hi, centers, r2, k, seed, out, counts):
    # Reservoir sampling (Algorithm L) over the ball members in traversal
    # order. Nodes entirely inside the ball are consumed without distance
    # tests: only the positions the skip sequence lands on are touched.
    np.random.seed(seed)
    stack = np.empty(_STACK, dtype=np.int64)
    d = skeys.shape[1]
    for i in range(centers.shape[0]):
        c = centers[i]
        seen = 0
        w = np.exp(np.log(np.random.random()) / k)
        nxt = k + _skip(k, w)
        stack[0] = 0
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            if _box_dist2(box_lo[node], box_hi[node], c) > r2:
                continue
            if _box_maxdist2(box_lo[node], box_hi[node], c) <= r2:
                s0 = start[node]
                cnt = end[node] - s0
                while seen < k and cnt > 0:
                    out[i, seen] = order[s0]
                    seen += 1
                    s0 += 1
                    cnt -= 1
                while nxt < seen + cnt:
                    out[i, np.random.randint(0, k)] = order[s0 + (nxt - seen)]
                    w *= np.exp(np.log(np.random.random()) / k)
                    nxt += _skip(k, w) + 1
                seen += cnt
            elif split_axis[node] < 0:
                for j in range(start[node], end[node]):
                    d2 = 0.0
                    for a in range(d):
                        t = skeys[j, a] - c[a]
                        d2 += t * t
                    if d2 <= r2:
                        if seen < k:
                            out[i, seen] = order[j]
                        elif seen == nxt:
                            out[i, np.random.randint(0, k)] = order[j]
                            w *= np.exp(np.log(np.random.random()) / k)
                            nxt += _skip(k, w) + 1
                        seen += 1
            else:
                stack[top] = right[node]
                stack[top + 1] = left[node]
                top += 2
        counts[i] = seen
        if 0 < seen < k:
            for j in range(seen, k):
                out[i, j] = out[i, np.random.randint(0, seen)]


def _tree_args(tree: KdTree):
    return (
        tree.sorted_keys,
        tree.order,
        tree.split_axis,
        tree.left,
        tree.right,
        tree.start,
        tree.end,
        tree.box_lo,
        tree.box_hi,
    )


def radius_query(tree: KdTree, center, radius: float) -> np.ndarray:
    """Indices within Euclidean distance ``radius`` of ``center``, ascending."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    c = np.ascontiguousarray(np.asarray(center, dtype=np.float64)[: tree.dims])
    out = np.empty(tree.n_points, dtype=np.int64)
    n = _radius_collect(*_tree_args(tree), c, float(radius) ** 2, out)
    return np.sort(out[:n])


def sample_neighbors(candidates, k: int, rng: np.random.Generator) -> np.ndarray:
    """Exactly ``k`` indices from ``candidates``.

    Uniform without replacement when there are enough candidates; otherwise
    every candidate once plus uniform draws with replacement.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("no neighbor candidates")
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if len(candidates) >= k:
        return rng.choice(candidates, size=k, replace=False)
    extra = rng.choice(candidates, size=k - len(candidates), replace=True)
    return np.concatenate([candidates, extra])


def sample_radius_neighbors(
    tree: KdTree, centers: np.ndarray, spec: NeighborhoodSpec, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """K sampled ball members for every center, without materializing the balls.

    Returns (indices (m, K), ball sizes (m,)). Same sampling law as
    :func:`sample_neighbors` applied to the full radius query.
    """
    centers = np.ascontiguousarray(np.asarray(centers, dtype=np.float64)[:, : tree.dims])
    m = len(centers)
    out = np.zeros((m, spec.k), dtype=np.int64)
    counts = np.zeros(m, dtype=np.int64)
    _sample_ball(
        *_tree_args(tree), centers, float(spec.radius) ** 2, spec.k,
        int(seed) % (2**32), out, counts,
    )
    if np.any(counts == 0):
        raise ValueError("empty neighborhood: a query center has no points within R")
    return out, counts


def derive_seed(*parts: int) -> int:
    """Stable per-task seed from (global seed, block id, ...)."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# blocks


@dataclass
class Block:
    grid_index: tuple[int, int]
    bounds: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    indices: np.ndarray
    block_id: int = 0


def _axis_memberships(coord, origin, size, stride, n):
    """Per point, the list of (point, anchor) pairs along one axis."""
    rel = coord - origin
    hi = np.floor(rel / stride).astype(np.int64)
    reach = int(math.ceil(size / stride)) + 1
    pts, anchors = [], []
    for o in range(reach):
        a = hi - o
        ok = (a >= 0) & (a < n)
        a0 = origin + a * stride
        inside = (coord >= a0) & ((coord < a0 + size) | ((a == n - 1) & (coord <= a0 + size)))
        ok &= inside
        pts.append(np.nonzero(ok)[0])
        anchors.append(a[ok])
    # the final anchor is closed at its far edge so the scene maximum is covered
    return np.concatenate(pts), np.concatenate(anchors)


def grid_counts(extent: float, size: float, stride: float) -> int:
    if extent <= size:
        return 1
    return int(math.ceil((extent - size) / stride - 1e-9)) + 1


def partition_blocks(cloud: PointCloud, block_size: float, overlap: float) -> list[Block]:
    """Overlapping square tiles anchored at the scene x/y minimum.

    Membership is half-open ([min, max)) except that the last tile along each
    axis also takes points on its far edge. Empty tiles are dropped; blocks
    come out in (row, column) order.
    """
    if not block_size > 0:
        raise ValueError("block_size must be positive")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    stride = block_size * (1.0 - overlap)
    lo, hi = cloud.bounds
    nx = grid_counts(hi[0] - lo[0], block_size, stride)
    ny = grid_counts(hi[1] - lo[1], block_size, stride)
    px, ax = _axis_memberships(cloud.xyz[:, 0], lo[0], block_size, stride, nx)
    py, ay = _axis_memberships(cloud.xyz[:, 1], lo[1], block_size, stride, ny)
    # join the two axis memberships on point index
    n = len(cloud)
    ox = np.argsort(px, kind="stable")
    px, ax = px[ox], ax[ox]
    oy = np.argsort(py, kind="stable")
    py, ay = py[oy], ay[oy]
    xs = np.searchsorted(px, np.arange(n + 1))
    ys = np.searchsorted(py, np.arange(n + 1))
    cx = np.diff(xs)
    cy = np.diff(ys)
    pair_pts, pair_i, pair_j = [], [], []
    for dx in range(int(cx.max(initial=0))):
        for dy in range(int(cy.max(initial=0))):
            ok = (cx > dx) & (cy > dy)
            p = np.nonzero(ok)[0]
            pair_pts.append(p)
            pair_i.append(ax[xs[p] + dx])
            pair_j.append(ay[ys[p] + dy])
    pts = np.concatenate(pair_pts)
    bi = np.concatenate(pair_i)
    bj = np.concatenate(pair_j)
    srt = np.lexsort((pts, bi, bj))
    pts, bi, bj = pts[srt], bi[srt], bj[srt]
    key = bj * nx + bi
    cuts = np.nonzero(np.diff(key))[0] + 1
    blocks = []
    for seg_pts, seg_i, seg_j in zip(np.split(pts, cuts), np.split(bi, cuts), np.split(bj, cuts)):
        if len(seg_pts) == 0:
            continue
        i, j = int(seg_i[0]), int(seg_j[0])
        x0 = lo[0] + i * stride
        y0 = lo[1] + j * stride
        blocks.append(
            Block((i, j), (x0, y0, x0 + block_size, y0 + block_size), seg_pts, j * nx + i)
        )
    return blocks


# ---------------------------------------------------------------------------
# neighborhood tensors


def neighborhood_features(
    cloud: PointCloud,
    query_xyz: np.ndarray,
    nbr_idx: np.ndarray,
    attributes: np.ndarray | None = None,
    nbr_xyz: np.ndarray | None = None,
) -> np.ndarray:
    """N x K x 10 array: neighbor xyz relative to its query point, then the
    neighbor's spectral, ndvi and scene-normalized channels."""
    attrs = point_attributes(cloud) if attributes is None else attributes
    coords = cloud.xyz[nbr_idx] if nbr_xyz is None else nbr_xyz
    offsets = coords - np.asarray(query_xyz)[:, None, :]
    return np.concatenate([offsets, attrs[nbr_idx]], axis=-1)


def assemble_neighborhood_tensor(
    cloud: PointCloud,
    indices,
    tree: KdTree,
    spec: NeighborhoodSpec,
    rng: np.random.Generator,
    attributes: np.ndarray | None = None,
) -> np.ndarray:
    """Sample K neighbors within R (3-D, whole scene) for every point in ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    seed = int(rng.integers(0, 2**32))
    nbr, _ = sample_radius_neighbors(tree, cloud.xyz[indices], spec, seed)
    return neighborhood_features(cloud, cloud.xyz[indices], nbr, attributes)
