"""Reverse-mode automatic differentiation over dense 2-D arrays.

Everything the model touches is a matrix: row vectors are 1 x n and
scalars are 1 x 1. Each primitive computes its forward value eagerly
with numpy and, when a Graph is active and an operand participates in
differentiation, appends a backward closure to the graph's tape.
Replaying the tape in reverse accumulates adjoints into ``grad``
buffers, visiting every recorded operation exactly once.

Ops executed with no active Graph are pure forward computations
(inference mode): no recording, no grad allocation.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit

_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense 2-D array with an optional same-shape gradient buffer."""

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype.type not in _DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ValueError(f"tensors are 2-D; got shape {arr.shape}")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values[0, 0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.values.dtype.name})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(values, dtype=None) -> Tensor:
    """Leaf tensor that accumulates gradients across backward passes."""
    return Tensor(values, requires_grad=True, dtype=dtype)


_local = threading.local()


def _graph_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Ordered tape of executed primitives for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)``. Backward zeroes the grads of every tensor the
    tape produced (leaf parameters keep theirs, so repeated calls
    accumulate), seeds the loss adjoint with 1 and replays the tape in
    reverse execution order. Graphs are confined to one thread; drop
    the object after stepping to free the recording.
    """

    __slots__ = ("_tape",)

    def __init__(self):
        self._tape: list[tuple] = []

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack().pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._tape)

    def backward(self, loss: Tensor) -> None:
        if loss.values.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.grad is None:
            raise ValueError("loss does not participate in differentiation")
        for _, out in self._tape:
            out.grad[...] = 0
        loss.grad[...] = 1
        for backward_fn, _ in reversed(self._tape):
            backward_fn()


def _record(out: Tensor, inputs: tuple, backward_fn) -> Tensor:
    graph = _active_graph()
    if graph is None:
        return out
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out.grad = np.zeros_like(out.values)
    graph._tape.append((backward_fn, out))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product (m x p) @ (p x q) -> (m x q)."""
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ: {a.shape} vs {b.shape}")
    out = Tensor(a.values @ b.values)

    def backward():
        if a.requires_grad:
            a.grad += out.grad @ b.values.T
        if b.requires_grad:
            b.grad += a.values.T @ out.grad

    return _record(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.values.T.copy())

    def backward():
        a.grad += out.grad.T

    return _record(out, (a,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a 1 x n row broadcast over a's rows."""
    if a.shape != b.shape and not (b.shape == (1, a.shape[1])):
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.values + b.values)

    def backward():
        if a.requires_grad:
            a.grad += out.grad
        if b.requires_grad:
            if b.shape == out.shape:
                b.grad += out.grad
            else:
                b.grad += out.grad.sum(axis=0, keepdims=True)

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of same-shape tensors."""
    if a.shape != b.shape:
        raise ValueError(f"mul: shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.values * b.values)

    def backward():
        if a.requires_grad:
            a.grad += out.grad * b.values
        if b.requires_grad:
            b.grad += out.grad * a.values

    return _record(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor(a.values * factor)

    def backward():
        a.grad += out.grad * factor

    return _record(out, (a,), backward)


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along rows (axis=0) or columns (axis=1)."""
    if axis not in (0, 1):
        raise ValueError(f"concat: axis must be 0 or 1, got {axis}")
    if not parts:
        raise ValueError("concat: no tensors given")
    out = Tensor(np.concatenate([p.values for p in parts], axis=axis))
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward():
        for part, lo, hi in zip(parts, offsets, offsets[1:]):
            if not part.requires_grad:
                continue
            if axis == 0:
                part.grad += out.grad[lo:hi, :]
            else:
                part.grad += out.grad[:, lo:hi]

    return _record(out, tuple(parts), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice a[:, start:stop]."""
    if not (0 <= start < stop <= a.shape[1]):
        raise ValueError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(a.values[:, start:stop].copy())

    def backward():
        a.grad[:, start:stop] += out.grad

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(expit(a.values))

    def backward():
        y = out.values
        a.grad += out.grad * y * (1.0 - y)

    return _record(out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.values))

    def backward():
        y = out.values
        a.grad += out.grad * (1.0 - y * y)

    return _record(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    """Natural log; inputs below the dtype's smallest normal are floored
    there so saturated probabilities keep the graph finite."""
    tiny = np.finfo(a.values.dtype).tiny
    floored = np.maximum(a.values, tiny)
    out = Tensor(np.log(floored))

    def backward():
        a.grad += out.grad / floored

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and normalizations


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    """Overflow-safe softmax along the given axis (max subtraction)."""
    if axis not in (0, 1):
        raise ValueError(f"softmax: axis must be 0 or 1, got {axis}")
    if a.shape[axis] == 0:
        raise ValueError(f"softmax: empty axis {axis} in shape {a.shape}")
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=axis, keepdims=True))

    def backward():
        y = out.values
        inner = (out.grad * y).sum(axis=axis, keepdims=True)
        a.grad += y * (out.grad - inner)

    return _record(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    """Reduce every element to a 1 x 1 scalar."""
    out = Tensor(np.array([[a.values.sum()]], dtype=a.values.dtype))

    def backward():
        a.grad += out.grad[0, 0]

    return _record(out, (a,), backward)


def mean(a: Tensor, axis: int = 0) -> Tensor:
    """Mean over rows (axis=0 -> 1 x n) or columns (axis=1 -> m x 1)."""
    if axis not in (0, 1):
        raise ValueError(f"mean: axis must be 0 or 1, got {axis}")
    out = Tensor(a.values.mean(axis=axis, keepdims=True))
    extent = a.shape[axis]

    def backward():
        a.grad += out.grad / extent

    return _record(out, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization: (x - row mean) / sqrt(row var + eps)."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    mu = a.values.mean(axis=1, keepdims=True)
    var = a.values.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = (a.values - mu) * inv_std
    out = Tensor(normed)

    def backward():
        g = out.grad
        g_mean = g.mean(axis=1, keepdims=True)
        gx_mean = (g * normed).mean(axis=1, keepdims=True)
        a.grad += inv_std * (g - g_mean - normed * gx_mean)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# lookups and regularization


def embedding(table: Tensor, index: int) -> Tensor:
    """Column lookup: table is E x V, returns column `index` as a 1 x E row."""
    if not (0 <= index < table.shape[1]):
        raise ValueError(f"embedding: index {index} out of range for {table.shape}")
    out = Tensor(table.values[:, index].copy().reshape(1, -1))

    def backward():
        table.grad[:, index] += out.grad[0, :]

    return _record(out, (table,), backward)


def pick(a: Tensor, cols) -> Tensor:
    """Gather one column per row: out[0, t] = a[t, cols[t]] (1 x m)."""
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (a.shape[0],):
        raise ValueError(f"pick: need {a.shape[0]} column indices, got {cols.shape}")
    if cols.size and (cols.min() < 0 or cols.max() >= a.shape[1]):
        raise ValueError(f"pick: column index out of range for {a.shape}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.values[rows, cols].reshape(1, -1))

    def backward():
        np.add.at(a.grad, (rows, cols), out.grad[0, :])

    return _record(out, (a,), backward)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-rate).

    rate=0 is the identity (and the inference path simply never calls
    this). The mask comes from the caller's generator, so a fixed seed
    gives a deterministic forward pass.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.shape) >= rate).astype(a.values.dtype) / keep
    out = Tensor(a.values * mask)

    def backward():
        a.grad += out.grad * mask

    return _record(out, (a,), backward)
