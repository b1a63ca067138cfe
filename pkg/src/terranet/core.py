"""Dense numeric core: shared dense layers, relu, axis max-pooling, concat,
log-cosh loss and Adam, each with a hand-written backward pass.

Tensors are plain ``numpy.ndarray`` objects. float64 is used for gradient
verification, float32 for training and inference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LN2 = float(np.log(2.0))


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {where}")
    return x


@dataclass
class DenseLayerParams:
    weights: np.ndarray  # (F_in, F_out)
    biases: np.ndarray  # (F_out,)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[1],):
            raise DimensionError(
                f"weights {self.weights.shape} and biases {self.biases.shape} do not chain"
            )

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]

    def astype(self, dtype) -> "DenseLayerParams":
        return DenseLayerParams(self.weights.astype(dtype), self.biases.astype(dtype))


# ---------------------------------------------------------------------------
# layers


def shared_dense_forward(x: np.ndarray, layer: DenseLayerParams) -> np.ndarray:
    """Apply the same affine map to every feature vector along the last axis.

    Works for any number of leading dimensions (N x F, N x K x F, B x N x K x F).
    """
    if x.shape[-1] != layer.fan_in:
        raise DimensionError(
            f"input shape {x.shape} does not match weights {layer.weights.shape}"
        )
    return x @ layer.weights + layer.biases


def shared_dense_backward(
    x: np.ndarray, layer: DenseLayerParams, grad_out: np.ndarray
) -> tuple[np.ndarray, DenseLayerParams]:
    """Return (grad wrt input, grads wrt weights/biases)."""
    flat_x = x.reshape(-1, layer.fan_in)
    flat_g = grad_out.reshape(-1, layer.fan_out)
    grad_w = flat_x.T @ flat_g
    grad_b = flat_g.sum(axis=0)
    grad_x = grad_out @ layer.weights.T
    return grad_x, DenseLayerParams(grad_w, grad_b)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # x is the pre-activation; derivative at exactly 0 taken as 0
    return grad_out * (x > 0)


def maxpool_axis(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Max over ``axis``; returns the pooled array and first-occurrence argmax."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] < 1:
        raise DimensionError(f"cannot pool over empty axis {axis} of shape {x.shape}")
    idx = np.argmax(x, axis=axis)
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)
    return np.squeeze(out, axis=axis), idx


def maxpool_axis_backward(
    grad_out: np.ndarray, argmax: np.ndarray, axis: int, size: int
) -> np.ndarray:
    """Route each pooled gradient entry back to its argmax position."""
    axis = axis % (grad_out.ndim + 1)
    shape = list(grad_out.shape)
    shape.insert(axis, size)
    grad = np.zeros(shape, dtype=grad_out.dtype)
    np.put_along_axis(
        grad, np.expand_dims(argmax, axis), np.expand_dims(grad_out, axis), axis=axis
    )
    return grad


def concat_last_axis(*parts: np.ndarray) -> np.ndarray:
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise DimensionError(
                f"leading dimensions differ: {[q.shape for q in parts]}"
            )
    return np.concatenate(parts, axis=-1)


def split_last_axis(x: np.ndarray, widths: Sequence[int]) -> list[np.ndarray]:
    """Inverse of concat_last_axis for the backward pass."""
    if sum(widths) != x.shape[-1]:
        raise DimensionError(f"widths {list(widths)} do not sum to {x.shape[-1]}")
    cuts = np.cumsum(widths)[:-1]
    return np.split(x, cuts, axis=-1)


# ---------------------------------------------------------------------------
# loss


def logcosh(x: np.ndarray) -> np.ndarray:
    """Overflow-safe log(cosh(x))."""
    a = np.abs(x)
    return a + np.log1p(np.exp(-2.0 * a)) - LN2


def logcosh_loss(truth: np.ndarray, pred: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed log-cosh of the residuals and its gradient wrt ``pred``."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise DimensionError(f"truth {truth.shape} vs pred {pred.shape}")
    if truth.size < 1:
        raise DimensionError("empty loss input")
    r = truth - pred
    check_finite(r, "loss residual")
    return float(np.sum(logcosh(r))), -np.tanh(r)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state have different lengths")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape}")
        check_finite(g, "gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)


# ---------------------------------------------------------------------------
# verification


def gradient_check(
    loss_fn: Callable[[], float],
    params: Sequence[np.ndarray],
    analytic: Sequence[np.ndarray],
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn`` is re-evaluated after perturbing each entry of ``params`` in
    place; every entry is restored afterwards.
    """
    if not 1e-7 <= epsilon <= 1e-4:
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-4]")
    worst = 0.0
    for p, g in zip(params, analytic):
        if p.dtype != np.float64:
            raise TypeError("gradient checks require float64 parameters")
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            up = loss_fn()
            flat[i] = old - epsilon
            down = loss_fn()
            flat[i] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while probing parameter entry {i}")
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(1e-12, abs(gflat[i]) + abs(numeric))
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
