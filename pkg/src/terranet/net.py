"""Two-branch point/neighborhood regression network.

Point branch: stacked shared dense + relu layers over the N x F points. The
penultimate activation is the point-wise feature P, the last one is
max-pooled over the block into the global vector B.
Neighborhood branch: shared dense + relu over N x K x F, max over K -> G'.
Head: dense + relu layers over concat(P, B, G'), the last of width 1, so every
prediction is >= 0.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    DenseLayerParams,
    DimensionError,
    check_finite,
    concat_last_axis,
    maxpool_axis,
    maxpool_axis_backward,
    relu,
    relu_backward,
    shared_dense_backward,
    shared_dense_forward,
    split_last_axis,
)

CHECKPOINT_MAGIC = b"TNET"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class NetConfig:
    point_branch_widths: list[int] = field(default_factory=lambda: [64, 64, 128, 1024])
    neighborhood_branch_widths: list[int] = field(default_factory=lambda: [64, 128])
    head_widths: list[int] = field(default_factory=lambda: [512, 256, 128, 1])
    input_features: int = 10

    def __post_init__(self):
        self.point_branch_widths = [int(w) for w in self.point_branch_widths]
        self.neighborhood_branch_widths = [int(w) for w in self.neighborhood_branch_widths]
        self.head_widths = [int(w) for w in self.head_widths]
        widths = self.point_branch_widths + self.neighborhood_branch_widths + self.head_widths
        if any(w < 1 for w in widths) or self.input_features < 1:
            raise ValueError(f"all widths must be >= 1: {self}")
        if not self.point_branch_widths:
            raise ValueError("point branch needs at least one layer")
        if not self.head_widths or self.head_widths[-1] != 1:
            raise ValueError("head must end in a width-1 layer")

    @property
    def point_feature_width(self) -> int:
        w = self.point_branch_widths
        return w[-2] if len(w) > 1 else w[-1]

    @property
    def global_width(self) -> int:
        return self.point_branch_widths[-1]

    @property
    def neighborhood_width(self) -> int:
        w = self.neighborhood_branch_widths
        return w[-1] if w else 0

    @property
    def concat_widths(self) -> list[int]:
        return [self.point_feature_width, self.global_width, self.neighborhood_width]

    def scaled(self, factor: float) -> "NetConfig":
        """Same topology with every hidden width multiplied by ``factor``."""
        def sc(ws):
            return [max(1, int(round(w * factor))) for w in ws]

        return NetConfig(
            sc(self.point_branch_widths),
            sc(self.neighborhood_branch_widths),
            sc(self.head_widths[:-1]) + [1],
            self.input_features,
        )


@dataclass
class NetParams:
    point: list[DenseLayerParams]
    neighborhood: list[DenseLayerParams]
    head: list[DenseLayerParams]

    def layers(self) -> list[DenseLayerParams]:
        return self.point + self.neighborhood + self.head

    def arrays(self) -> list[np.ndarray]:
        """Flat [W0, b0, W1, b1, ...] view in branch order (point, neighborhood, head)."""
        out = []
        for layer in self.layers():
            out.extend((layer.weights, layer.biases))
        return out

    def copy(self) -> "NetParams":
        def cp(ls):
            return [DenseLayerParams(l.weights.copy(), l.biases.copy()) for l in ls]

        return NetParams(cp(self.point), cp(self.neighborhood), cp(self.head))

    def astype(self, dtype) -> "NetParams":
        return NetParams(
            [l.astype(dtype) for l in self.point],
            [l.astype(dtype) for l in self.neighborhood],
            [l.astype(dtype) for l in self.head],
        )

    @property
    def dtype(self):
        return self.point[0].weights.dtype


def _chain(fan_in: int, widths: list[int]) -> list[tuple[int, int]]:
    shapes = []
    for w in widths:
        shapes.append((fan_in, w))
        fan_in = w
    return shapes


def layer_shapes(config: NetConfig) -> dict[str, list[tuple[int, int]]]:
    f = config.input_features
    return {
        "point": _chain(f, config.point_branch_widths),
        "neighborhood": _chain(f, config.neighborhood_branch_widths),
        "head": _chain(sum(config.concat_widths), config.head_widths),
    }


def init_network(config: NetConfig, seed: int, dtype=np.float32) -> NetParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    branches = {}
    for name, shapes in layer_shapes(config).items():
        layers = []
        for fi, fo in shapes:
            a = np.sqrt(6.0 / (fi + fo))
            w = rng.uniform(-a, a, size=(fi, fo)).astype(dtype)
            layers.append(DenseLayerParams(w, np.zeros(fo, dtype=dtype)))
        branches[name] = layers
    return NetParams(**branches)


# ---------------------------------------------------------------------------
# forward / backward


def _check_inputs(params: NetParams, points: np.ndarray, neighborhoods: np.ndarray) -> None:
    f = params.point[0].fan_in
    if points.shape[-1] != f or neighborhoods.shape[-1] != f:
        raise DimensionError(
            f"feature width mismatch: points {points.shape}, neighborhoods "
            f"{neighborhoods.shape}, network expects {f}"
        )
    if neighborhoods.shape[:-2] != points.shape[:-1]:
        raise DimensionError(
            f"points {points.shape} and neighborhoods {neighborhoods.shape} disagree on N"
        )


def _dense_relu_stack(x, layers, keep):
    trace = []
    for layer in layers:
        z = shared_dense_forward(x, layer)
        if keep:
            trace.append((x, z))
        x = relu(z)
    return x, trace


def _point_branch(params, points, keep):
    h = points
    trace = []
    acts = []
    for layer in params.point:
        z = shared_dense_forward(h, layer)
        trace.append((h, z))
        h = relu(z)
        acts.append(h)
    P = acts[-2] if len(acts) > 1 else acts[-1]
    B, argB = maxpool_axis(acts[-1], axis=-2)
    check_finite(P, "point features")
    return P, B, argB, (trace if keep else None)


def _neighborhood_branch(params, neighborhoods, keep):
    if not params.neighborhood:
        return np.zeros(neighborhoods.shape[:-2] + (0,), dtype=neighborhoods.dtype), None, None
    g, trace = _dense_relu_stack(neighborhoods, params.neighborhood, keep)
    Gp, argG = maxpool_axis(g, axis=-2)
    check_finite(Gp, "neighborhood features")
    return Gp, argG, trace


def _head(params, T, keep):
    out, trace = _dense_relu_stack(T, params.head, keep)
    pred = out[..., 0]
    check_finite(pred, "prediction")
    return pred, trace


def forward(params: NetParams, points: np.ndarray, neighborhoods: np.ndarray):
    """Predictions for ``points`` (..., N, F) with ``neighborhoods`` (..., N, K, F).

    Leading batch dimensions are allowed; pooling for B is per block (axis -2).
    Returns (pred (..., N), cache).
    """
    _check_inputs(params, points, neighborhoods)
    P, B, argB, ptrace = _point_branch(params, points, True)
    Gp, argG, gtrace = _neighborhood_branch(params, neighborhoods, True)
    Brep = np.broadcast_to(B[..., None, :], P.shape[:-1] + B.shape[-1:])
    T = concat_last_axis(P, Brep, Gp)
    pred, htrace = _head(params, T, True)
    cache = {
        "n": points.shape[-2],
        "k": neighborhoods.shape[-2],
        "point": ptrace,
        "argB": argB,
        "nbr": gtrace,
        "argG": argG,
        "head": htrace,
        "widths": [P.shape[-1], B.shape[-1], Gp.shape[-1]],
        "pred_shape": pred.shape,
    }
    return pred, cache


def predict(params: NetParams, points: np.ndarray, neighborhoods: np.ndarray, chunk: int | None = None) -> np.ndarray:
    """Forward pass without a cache; the per-point part runs in row chunks.

    The global vector is always pooled over the whole block first, so
    chunking never changes the result.
    """
    _check_inputs(params, points, neighborhoods)
    P, B, _, _ = _point_branch(params, points, False)
    n = points.shape[-2]
    chunk = n if not chunk else chunk
    out = []
    for s in range(0, n, chunk):
        Gp, _, _ = _neighborhood_branch(params, neighborhoods[..., s : s + chunk, :, :], False)
        Pc = P[..., s : s + chunk, :]
        Brep = np.broadcast_to(B[..., None, :], Pc.shape[:-1] + B.shape[-1:])
        pred, _ = _head(params, concat_last_axis(Pc, Brep, Gp), False)
        out.append(pred)
    return np.concatenate(out, axis=-1)


def _stack_backward(trace, layers, grad):
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        x, z = trace[i]
        grad = relu_backward(z, grad)
        grad, grads[i] = shared_dense_backward(x, layers[i], grad)
    return grad, grads


def backward(params: NetParams, cache: dict, grad_pred: np.ndarray) -> NetParams:
    """Gradients of the loss wrt every parameter, given dLoss/dpred."""
    if grad_pred.shape != cache["pred_shape"]:
        raise DimensionError(
            f"loss gradient {grad_pred.shape} does not match cached forward {cache['pred_shape']}"
        )
    g = grad_pred[..., None]
    gT, head_grads = _stack_backward(cache["head"], params.head, g)
    gP, gB, gG = split_last_axis(gT, cache["widths"])

    nbr_grads = []
    if params.neighborhood:
        g_act = maxpool_axis_backward(gG, cache["argG"], axis=-2, size=cache["k"])
        _, nbr_grads = _stack_backward(cache["nbr"], params.neighborhood, g_act)

    # B was replicated to every row: sum over rows, then route through the pool
    g_last = maxpool_axis_backward(gB.sum(axis=-2), cache["argB"], axis=-2, size=cache["n"])
    layers = params.point
    trace = cache["point"]
    point_grads = [None] * len(layers)
    grad = g_last
    if len(layers) == 1:
        grad = grad + gP
    for i in range(len(layers) - 1, -1, -1):
        if i == len(layers) - 2:
            grad = grad + gP
        x, z = trace[i]
        grad = relu_backward(z, grad)
        grad, point_grads[i] = shared_dense_backward(x, layers[i], grad)
    return NetParams(point_grads, nbr_grads, head_grads)


# ---------------------------------------------------------------------------
# checkpoints


def _encode_params(params: NetParams) -> bytes:
    parts = [struct.pack("<I", len(params.layers()))]
    for layer in params.layers():
        fi, fo = layer.weights.shape
        parts.append(struct.pack("<II", fi, fo))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(layer.biases, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, params: NetParams, config: NetConfig, metadata: dict | None = None) -> None:
    """Write parameters as float32 with a trailing CRC-32.

    Layout: b"TNET", u32 version, u32 length + UTF-8 JSON descriptor
    ({"config": ..., "metadata": ...}), u32 layer count, then per layer u32
    fan_in, u32 fan_out, weights, biases (little-endian f32), then u32 CRC-32
    of everything before it.
    """
    desc = json.dumps(
        {"config": asdict(config), "metadata": metadata or {}}, sort_keys=True
    ).encode("utf-8")
    body = b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<I", CHECKPOINT_VERSION),
            struct.pack("<I", len(desc)),
            desc,
            _encode_params(params),
        ]
    )
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[NetParams, NetConfig, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a TNET checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        (dlen,) = struct.unpack_from("<I", body, 8)
        desc = json.loads(body[12 : 12 + dlen].decode("utf-8"))
        config = NetConfig(**desc["config"])
        off = 12 + dlen
        (n_layers,) = struct.unpack_from("<I", body, off)
        off += 4
        layers = []
        for _ in range(n_layers):
            fi, fo = struct.unpack_from("<II", body, off)
            off += 8
            w = np.frombuffer(body, dtype="<f4", count=fi * fo, offset=off).reshape(fi, fo)
            off += 4 * fi * fo
            b = np.frombuffer(body, dtype="<f4", count=fo, offset=off)
            off += 4 * fo
            layers.append(DenseLayerParams(w.astype(np.float32), b.astype(np.float32)))
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameters")
    shapes = layer_shapes(config)
    npnt, nnbr = len(shapes["point"]), len(shapes["neighborhood"])
    params = NetParams(layers[:npnt], layers[npnt : npnt + nnbr], layers[npnt + nnbr :])
    expected = [s for k in ("point", "neighborhood", "head") for s in shapes[k]]
    if [l.weights.shape for l in params.layers()] != expected:
        raise CheckpointError(f"{path}: layer shapes do not match the stored config")
    return params, config, desc["metadata"]


# ---------------------------------------------------------------------------
# verification


def network_gradient_check(config: NetConfig, seed: int = 0, n: int = 8, k: int = 4,
                           epsilon: float = 1e-5) -> float:
    """Finite-difference check of :func:`backward` on a random float64 network
    with log-cosh loss. Returns the max relative error over all parameters."""
    from .core import gradient_check, logcosh_loss

    rng = np.random.default_rng(seed)
    params = init_network(config, seed, np.float64)
    for layer in params.layers():
        layer.biases[:] = rng.normal(0.0, 0.1, size=layer.biases.shape)
    # keep the output unit active so the check exercises every path
    params.head[-1].biases[:] = 1.0
    f = config.input_features
    points = rng.normal(size=(n, f))
    nbrs = rng.normal(size=(n, k, f))
    truth = rng.uniform(0.0, 3.0, size=n)

    def loss():
        return logcosh_loss(truth, forward(params, points, nbrs)[0])[0]

    pred, cache = forward(params, points, nbrs)
    _, g = logcosh_loss(truth, pred)
    grads = backward(params, cache, g)
    return gradient_check(loss, params.arrays(), grads.arrays(), epsilon)
