"""Reverse-mode automatic differentiation over dense float64 matrices.

A dynamically recorded tape of 2-D ``Value`` nodes supplies exactly the
primitives the encoder and decoder heads need. The tape is a module-level
list (one computation at a time, single-threaded); call :func:`reset_tape`
between independent computations and :func:`backward` on a scalar loss.
Inside :func:`no_grad` nothing is recorded, which makes repeated forward
evaluation (finite differences, inference) cheap.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import Rng


class ShapeMismatch(ValueError):
    def __init__(self, op: str, expected, got):
        super().__init__(f"{op}: expected shape {expected}, got {got}")
        self.expected = expected
        self.got = got


_TAPE: list["Value"] = []
_GRAD_ENABLED = True


def reset_tape() -> None:
    _TAPE.clear()


def tape_size() -> int:
    return len(_TAPE)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Value:
    """A matrix on the tape. ``data`` is write-once; ``grad`` is lazily allocated."""

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents: tuple = (),
                 backward: Optional[Callable[[np.ndarray], None]] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeMismatch("Value", "2-D", arr.shape)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        if _GRAD_ENABLED and backward is not None:
            self._parents = parents
            self._backward = backward
            _TAPE.append(self)
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch("item", (1, 1), self.data.shape)
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        return f"Value(shape={self.data.shape})"


def _accum(v: Value, g: np.ndarray) -> None:
    if v.grad is None:
        v.grad = np.zeros_like(v.data)
    v.grad += g


def _node(data: np.ndarray, parents: tuple, backward) -> Value:
    if not _GRAD_ENABLED:
        return Value(data)
    return Value(data, parents, backward)


def backward(loss: Value) -> None:
    """Accumulate gradients of a scalar loss into every reachable node."""
    if loss.shape != (1, 1):
        raise ShapeMismatch("backward", (1, 1), loss.shape)
    loss.grad = np.ones((1, 1))
    for node in reversed(_TAPE):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


def zero_grads(values) -> None:
    for v in values:
        v.grad = None


# --- primitives ---

def matmul(a: Value, b: Value) -> Value:
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", f"({a.shape[0]},k)x(k,{b.shape[1]})",
                            f"{a.shape}x{b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)
    return _node(out_data, (a, b), bwd)


def add(a: Value, b: Value) -> Value:
    """Elementwise sum; ``b`` may be a single row broadcast over a's rows."""
    row_bias = b.shape == (1, a.shape[1]) and a.shape[0] != 1
    if not row_bias and a.shape != b.shape:
        raise ShapeMismatch("add", a.shape, b.shape)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, g.sum(axis=0, keepdims=True) if row_bias else g)
    return _node(out_data, (a, b), bwd)


def sub(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ShapeMismatch("sub", a.shape, b.shape)
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)
    return _node(out_data, (a, b), bwd)


def mul(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise ShapeMismatch("mul", a.shape, b.shape)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _node(out_data, (a, b), bwd)


def affine(x: Value, scale: float, shift: float = 0.0) -> Value:
    out_data = scale * x.data + shift

    def bwd(g):
        _accum(x, scale * g)
    return _node(out_data, (x,), bwd)


def concat_cols(*parts: Value) -> Value:
    rows = parts[0].shape[0]
    for p in parts:
        if p.shape[0] != rows:
            raise ShapeMismatch("concat_cols", (rows, "*"), p.shape)
    out_data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]

    def bwd(g):
        at = 0
        for p, w in zip(parts, widths):
            _accum(p, g[:, at:at + w])
            at += w
    return _node(out_data, tuple(parts), bwd)


def concat_rows(parts: Sequence[Value]) -> Value:
    parts = tuple(parts)
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise ShapeMismatch("concat_rows", ("*", cols), p.shape)
    out_data = np.concatenate([p.data for p in parts], axis=0)
    heights = [p.shape[0] for p in parts]

    def bwd(g):
        at = 0
        for p, h in zip(parts, heights):
            _accum(p, g[at:at + h])
            at += h
    return _node(out_data, parts, bwd)


def row_gather(x: Value, index) -> Value:
    idx = np.asarray(index, dtype=np.int64)
    out_data = x.data[idx]

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, idx, g)
    return _node(out_data, (x,), bwd)


def scatter_sum(x: Value, index, out_rows: int) -> Value:
    """Sum rows of x into out_rows buckets given a per-row bucket index."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ShapeMismatch("scatter_sum", (x.shape[0],), idx.shape)
    out_data = np.zeros((out_rows, x.shape[1]))
    np.add.at(out_data, idx, x.data)

    def bwd(g):
        _accum(x, g[idx])
    return _node(out_data, (x,), bwd)


def take_per_row(x: Value, cols) -> Value:
    """Pick one entry per row: out[i, 0] = x[i, cols[i]]."""
    idx = np.asarray(cols, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ShapeMismatch("take_per_row", (x.shape[0],), idx.shape)
    rows = np.arange(x.shape[0])
    out_data = x.data[rows, idx].reshape(-1, 1)

    def bwd(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        np.add.at(x.grad, (rows, idx), g[:, 0])
    return _node(out_data, (x,), bwd)


def relu(x: Value) -> Value:
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accum(x, g * (x.data > 0.0))
    return _node(out_data, (x,), bwd)


def sigmoid(x: Value) -> Value:
    out_data = 1.0 / (1.0 + np.exp(-np.clip(x.data, -500, 500)))

    def bwd(g):
        _accum(x, g * out_data * (1.0 - out_data))
    return _node(out_data, (x,), bwd)


def tanh(x: Value) -> Value:
    out_data = np.tanh(x.data)

    def bwd(g):
        _accum(x, g * (1.0 - out_data * out_data))
    return _node(out_data, (x,), bwd)


def softplus(x: Value) -> Value:
    """log(1 + e^x), evaluated stably for large |x|."""
    out_data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def bwd(g):
        _accum(x, g / (1.0 + np.exp(-np.clip(x.data, -500, 500))))
    return _node(out_data, (x,), bwd)


def log(x: Value) -> Value:
    out_data = np.log(x.data)

    def bwd(g):
        _accum(x, g / x.data)
    return _node(out_data, (x,), bwd)


def softmax_rows(x: Value) -> Value:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        _accum(x, out_data * (g - dot))
    return _node(out_data, (x,), bwd)


def log_softmax_rows(x: Value) -> Value:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse

    def bwd(g):
        _accum(x, g - np.exp(out_data) * g.sum(axis=1, keepdims=True))
    return _node(out_data, (x,), bwd)


def dropout(x: Value, p: float, rng: Rng, train: bool) -> Value:
    """Inverted dropout: scales by 1/(1-p) in training, identity in eval."""
    if not train or p <= 0.0:
        return x
    keep = (rng.uniform(*x.shape) >= p) / (1.0 - p)
    out_data = x.data * keep

    def bwd(g):
        _accum(x, g * keep)
    return _node(out_data, (x,), bwd)


def layer_norm(x: Value, gamma: Value, beta: Value, eps: float = 1e-5) -> Value:
    """Row-wise normalization with learnable scale and shift (single rows)."""
    if gamma.shape != (1, x.shape[1]) or beta.shape != (1, x.shape[1]):
        raise ShapeMismatch("layer_norm", (1, x.shape[1]),
                            (gamma.shape, beta.shape))
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    sd = np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    norm = centered / sd
    out_data = norm * gamma.data + beta.data

    def bwd(g):
        _accum(gamma, (g * norm).sum(axis=0, keepdims=True))
        _accum(beta, g.sum(axis=0, keepdims=True))
        gy = g * gamma.data
        _accum(x, (gy - gy.mean(axis=1, keepdims=True)
                   - norm * (gy * norm).mean(axis=1, keepdims=True)) / sd)
    return _node(out_data, (x, gamma, beta), bwd)


def sum_all(x: Value) -> Value:
    out_data = np.array([[x.data.sum()]])

    def bwd(g):
        _accum(x, np.full_like(x.data, g[0, 0]))
    return _node(out_data, (x,), bwd)


def mean_all(x: Value) -> Value:
    out_data = np.array([[x.data.mean()]])

    def bwd(g):
        _accum(x, np.full_like(x.data, g[0, 0] / x.data.size))
    return _node(out_data, (x,), bwd)
