"""
Differentiable operations on Tensors.

Every op computes its forward result with numpy and, when a tape is active and
an input is tracked, records the local gradient rule. Broadcasting is limited to
scalar operands and a bias row added to a matrix.
"""
from __future__ import annotations

import logging
from typing import List, Sequence, Tuple, TypeVar, Union

import numpy as np

from hetmoe.autograd.tensor import ArrayLike, Tensor, as_tensor, make_output
from hetmoe.core.exceptions import ConfigError, DataError, DomainError, NumericError, ShapeError

logger = logging.getLogger(__name__)

IndexLike = Union[np.ndarray, slice, Tuple[Union[np.ndarray, slice], ...]]
GradT = TypeVar("GradT", Tensor, np.ndarray)


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1 and t.ndim <= 1


def _is_bias_row(big: Tensor, small: Tensor) -> bool:
    return big.ndim == 2 and small.ndim == 1 and small.shape[0] == big.shape[1]


def _reduce_to(grad: np.ndarray, target: Tensor) -> np.ndarray:
    """Sum a full-shape gradient down to a broadcast operand's shape."""
    if grad.shape == target.shape:
        return grad
    if _is_scalar(target):
        return np.full(target.shape, grad.sum())
    return grad.sum(axis=0)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if _is_scalar(a) or _is_scalar(b):
        return
    if _is_bias_row(a, b) or _is_bias_row(b, a):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _broadcast_data(a: Tensor, b: Tensor) -> Tuple[np.ndarray, np.ndarray]:
    # Scalars stored as shape (1,) must not promote a 0-d partner to 1-d.
    ad = a.data.reshape(()) if _is_scalar(a) and a.shape != b.shape else a.data
    bd = b.data.reshape(()) if _is_scalar(b) and a.shape != b.shape else b.data
    return ad, bd


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise sum with scalar and bias-row broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    ad, bd = _broadcast_data(a, b)

    def backward(g: np.ndarray):
        return _reduce_to(g, a), _reduce_to(g, b)

    return make_output("add", ad + bd, (a, b), backward)


def sub(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise difference with scalar and bias-row broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    ad, bd = _broadcast_data(a, b)

    def backward(g: np.ndarray):
        return _reduce_to(g, a), -_reduce_to(g, b)

    return make_output("sub", ad - bd, (a, b), backward)


def mul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """Elementwise product with scalar and bias-row broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = _broadcast_data(a, b)

    def backward(g: np.ndarray):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return make_output("mul", ad * bd, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant."""
    factor = float(factor)

    def backward(g: np.ndarray):
        return (g * factor,)

    return make_output("scale", a.data * factor, (a,), backward)


def matmul(a: Tensor, b: Tensor, stable_columns: bool = False) -> Tensor:
    """
    Matrix product of a [m x k] and b [k x n].

    With ``stable_columns`` the product is accumulated term by term over k, so
    column j of the result depends bit-for-bit only on ``a`` and column j of
    ``b``; deleting or appending columns of ``b`` leaves the others unchanged.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    if stable_columns:
        ad, bd = a.data, b.data
        out = ad[:, 0:1] * bd[0:1, :]
        for i in range(1, ad.shape[1]):
            out = out + ad[:, i:i + 1] * bd[i:i + 1, :]
    else:
        out = a.data @ b.data

    def backward(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return make_output("matmul", out, (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, stabilised by subtracting the maximum."""
    if x.shape[axis] < 1:
        raise ShapeError(f"softmax: empty axis {axis} in shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_output("softmax", s, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g: np.ndarray):
        return (g * (1.0 - t * t),)

    return make_output("tanh", t, (x,), backward)


def log(x: Tensor) -> Tensor:
    """Natural logarithm; every entry must be strictly positive."""
    if np.any(x.data <= 0.0):
        raise DomainError(f"log: non-positive input (min {x.data.min():.3e})")
    data = x.data

    def backward(g: np.ndarray):
        return (g / data,)

    return make_output("log", np.log(data), (x,), backward)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_output("sum", np.asarray(x.data.sum(axis=axis)), (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else shape[axis]

    def backward(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)

    return make_output("mean", np.asarray(x.data.mean(axis=axis)), (x,), backward)


def mse(pred: Tensor, target: Union[Tensor, ArrayLike]) -> Tensor:
    """Mean squared error over all entries."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred.data - target.data
    count = diff.size

    def backward(g: np.ndarray):
        grad = 2.0 * diff * g / count
        return grad, -grad

    return make_output("mse", np.asarray((diff * diff).mean()), (pred, target), backward)


def cross_entropy(logits: Tensor, labels: Union[np.ndarray, int, Sequence[int]]) -> Tensor:
    """Mean softmax cross-entropy of integer ``labels`` under ``logits`` [batch x C] or [C]."""
    squeeze = logits.ndim == 1
    z = logits.data.reshape(1, -1) if squeeze else logits.data
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.ndim != 2 or y.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} do not match labels {y.shape}")
    n_classes = z.shape[1]
    if np.any(y < 0) or np.any(y >= n_classes):
        raise DataError(f"cross_entropy: label out of range [0, {n_classes})")
    if not np.all(np.isfinite(z)):
        raise NumericError("cross_entropy: non-finite logits")

    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, y]
    probs = np.exp(shifted - log_norm[:, None])
    batch = z.shape[0]

    def backward(g: np.ndarray):
        grad = probs.copy()
        grad[rows, y] -= 1.0
        grad *= g / batch
        return (grad.reshape(logits.shape),)

    return make_output("cross_entropy", np.asarray(losses.mean()), (logits,), backward)


def l2_norm(x: Tensor) -> Tensor:
    norm = float(np.sqrt((x.data * x.data).sum()))

    def backward(g: np.ndarray):
        if norm == 0.0:
            return (np.zeros_like(x.data),)
        return (g * x.data / norm,)

    return make_output("l2_norm", np.asarray(norm), (x,), backward)


def index(x: Tensor, idx: IndexLike) -> Tensor:
    """Gather ``x[idx]`` (numpy indexing); the backward pass scatter-adds."""
    out = np.array(x.data[idx], dtype=np.float64, copy=True)

    def backward(g: np.ndarray):
        grad = np.zeros_like(x.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return make_output("index", out, (x,), backward)


def scatter_rows(x: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``x`` at positions ``rows`` of an otherwise zero [n_rows x ...] tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    if rows.shape[0] != x.shape[0]:
        raise ShapeError(f"scatter_rows: {rows.shape[0]} row positions for tensor of shape {x.shape}")
    out = np.zeros((n_rows,) + x.shape[1:], dtype=np.float64)
    np.add.at(out, rows, x.data)

    def backward(g: np.ndarray):
        return (g[rows],)

    return make_output("scatter_rows", out, (x,), backward)


def scale_rows(x: Tensor, weights: Tensor) -> Tensor:
    """Multiply row i of ``x`` [n x d] by ``weights[i]`` ([n])."""
    if x.ndim != 2 or weights.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows: cannot scale rows of {x.shape} by {weights.shape}")
    w = weights.data[:, None]

    def backward(g: np.ndarray):
        return g * w, (g * x.data).sum(axis=1)

    return make_output("scale_rows", x.data * w, (x, weights), backward)


def global_norm(grads: Sequence[Union[Tensor, np.ndarray]]) -> float:
    total = 0.0
    for g in grads:
        arr = g.data if isinstance(g, Tensor) else g
        total += float((arr * arr).sum())
    return float(np.sqrt(total))


def clip_global_norm(
    grads: Sequence[GradT], max_norm: float
) -> Tuple[List[GradT], float]:
    """
    Scale gradients so their joint L2 norm does not exceed ``max_norm``.

    Returns the (possibly) rescaled gradients and the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ConfigError(f"clip_global_norm: max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm

    factor = max_norm / norm
    clipped: List = []
    for g in grads:
        if isinstance(g, Tensor):
            clipped.append(Tensor(g.data * factor))
        else:
            clipped.append(g * factor)
    return clipped, norm
