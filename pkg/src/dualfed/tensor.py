"""Dense float64 matrix ops with hand-derived backward passes.

Everything is 2-D and row-major. There is no computation graph: each op
exposes a forward function and, where training needs it, a matching
backward function that the caller chains explicitly. A central-difference
gradient oracle (`finite_diff_grad`) is provided for checking the analytic
backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    BatchTooSmallError,
    DegenerateVectorError,
    DimensionError,
    NonFiniteError,
)

TRAIN = "train"
EVAL = "eval"


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be '{TRAIN}' or '{EVAL}', got {mode!r}")


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value")
    return arr


class Tensor:
    """2-D float64 matrix with an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad: np.ndarray | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor must be 2-D, got {arr.ndim}-D")
        self.data = arr
        self.grad = None if grad is None else np.array(grad, dtype=np.float64)
        if self.grad is not None and self.grad.shape != arr.shape:
            raise DimensionError("grad shape must match data shape")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(),
                      None if self.grad is None else self.grad.copy())

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Tensor":
        return cls(np.zeros((rows, cols)))

    def __repr__(self) -> str:
        return f"Tensor({self.rows}x{self.cols})"


@dataclass
class BatchNormState:
    """Per-feature affine parameters plus running statistics.

    gamma/beta participate in gradient flow; running_mean/running_var are
    updated in train mode only and never carry gradients.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    momentum: float = 0.1
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var.data < 0.0):
            raise ValueError("running_var entries must be nonnegative")

    @classmethod
    def identity(cls, num_features: int, momentum: float = 0.1,
                 epsilon: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones((1, num_features))),
            beta=Tensor(np.zeros((1, num_features))),
            running_mean=Tensor(np.zeros((1, num_features))),
            running_var=Tensor(np.ones((1, num_features))),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def num_features(self) -> int:
        return self.gamma.cols


def linear_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight + bias, bias broadcast over rows."""
    if x.cols != weight.rows:
        raise DimensionError(
            f"linear: x is {x.shape} but weight is {weight.shape}")
    if bias.rows != 1 or bias.cols != weight.cols:
        raise DimensionError(
            f"linear: bias must be 1x{weight.cols}, got {bias.shape}")
    out = x.data @ weight.data + bias.data
    return Tensor(_finite(out, "linear_forward"))


def linear_backward(x: Tensor, weight: Tensor,
                    grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a linear layer wrt (x, weight, bias)."""
    gx = grad_out @ weight.data.T
    gw = x.data.T @ grad_out
    gb = grad_out.sum(axis=0, keepdims=True)
    _finite(gx, "linear_backward")
    return gx, gw, gb


def relu_forward(x: Tensor) -> Tensor:
    """Elementwise max(0, x)."""
    return Tensor(_finite(np.maximum(x.data, 0.0), "relu_forward"))


def relu_backward(x: Tensor, grad_out: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return _finite(grad_out * (x.data > 0.0), "relu_backward")


def _batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0, keepdims=True)
    var = np.mean((x - mu) ** 2, axis=0, keepdims=True)  # biased (1/B)
    return mu, var


def batchnorm_forward(x: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Normalize per feature; train mode also updates the running stats.

    Train mode uses batch mean and biased batch variance and folds them
    into the running statistics as r <- (1-momentum)*r + momentum*batch.
    Eval mode normalizes with the running statistics and mutates nothing.
    """
    _check_mode(mode)
    if x.cols != state.num_features:
        raise DimensionError(
            f"batchnorm: x has {x.cols} features, state has {state.num_features}")
    if mode == TRAIN:
        if x.rows < 2:
            raise BatchTooSmallError(
                f"batchnorm train mode needs >= 2 rows, got {x.rows}")
        mu, var = _batch_stats(x.data)
        m = state.momentum
        state.running_mean.data *= 1.0 - m
        state.running_mean.data += m * mu
        state.running_var.data *= 1.0 - m
        state.running_var.data += m * var
    else:
        mu = state.running_mean.data
        var = state.running_var.data
    xhat = (x.data - mu) / np.sqrt(var + state.epsilon)
    out = state.gamma.data * xhat + state.beta.data
    return Tensor(_finite(out, "batchnorm_forward"))


def batchnorm_backward(x: Tensor, state: BatchNormState, mode: str,
                       grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients wrt (x, gamma, beta); statistics are recomputed from x.

    Train mode differentiates through the batch statistics; eval mode
    treats the running statistics as constants.
    """
    _check_mode(mode)
    if mode == TRAIN:
        if x.rows < 2:
            raise BatchTooSmallError(
                f"batchnorm train mode needs >= 2 rows, got {x.rows}")
        b = x.rows
        mu, var = _batch_stats(x.data)
        inv = 1.0 / np.sqrt(var + state.epsilon)
        xhat = (x.data - mu) * inv
        dxhat = grad_out * state.gamma.data
        gx = (inv / b) * (
            b * dxhat
            - dxhat.sum(axis=0, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=0, keepdims=True)
        )
    else:
        inv = 1.0 / np.sqrt(state.running_var.data + state.epsilon)
        xhat = (x.data - state.running_mean.data) * inv
        gx = grad_out * state.gamma.data * inv
    ggamma = (grad_out * xhat).sum(axis=0, keepdims=True)
    gbeta = grad_out.sum(axis=0, keepdims=True)
    _finite(gx, "batchnorm_backward")
    return gx, ggamma, gbeta


def softmax_forward(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction for stability."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)
    return Tensor(_finite(out, "softmax_forward"))


def softmax_backward(y: Tensor, grad_out: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of softmax given its output y."""
    dot = (grad_out * y.data).sum(axis=1, keepdims=True)
    return _finite(y.data * (grad_out - dot), "softmax_backward")


def cosine_similarity(u: Tensor, v: Tensor) -> float:
    """u . v / (|u| |v|) for two 1xd vectors."""
    if u.rows != 1 or v.rows != 1 or u.cols != v.cols:
        raise DimensionError(
            f"cosine_similarity needs two 1xd vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(u.data.reshape(-1) @ v.data.reshape(-1)) / (nu * nv)


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor,
                     h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, entry by entry.

    Each evaluation of f receives a fresh copy of x, so f may freely build
    stateful structures (e.g. batch-norm states) without leaking between
    probes.
    """
    grad = np.zeros_like(x.data)
    it = np.nditer(x.data, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        xp = Tensor(x.data.copy())
        xp.data[idx] += h
        fp = f(xp)
        xm = Tensor(x.data.copy())
        xm.data[idx] -= h
        fm = f(xm)
        grad[idx] = (fp - fm) / (2.0 * h)
        it.iternext()
    return Tensor(grad)
