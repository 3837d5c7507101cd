"""Dense 2-D tensors with a reverse-mode autodiff tape.

Every tensor is a row-major float64 matrix.  Operations record their
backward rule on the implicit tape (the parent graph); calling
``backward`` on a scalar loss topologically sorts the reachable graph and
accumulates gradients into every ``requires_grad`` leaf.  Broadcasting is
restricted to row vectors (1 x n), column vectors (m x 1) and scalars.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """A 2-D float64 matrix, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def detach(self):
        """Value copy with no tape history."""
        return Tensor(self.data.copy())

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        """Accumulate gradients of this scalar into all reachable leaves."""
        if self.data.shape != (1, 1):
            raise ValueError(f"backward needs a scalar (1x1) loss, got {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in order:
            node.grad = None
        self.grad = np.ones((1, 1))
        for node in reversed(order):
            if node._backward_fn is None or node.grad is None:
                continue
            for parent, contrib in node._backward_fn(node.grad):
                if not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1, 1), float(x)))


def _needs_grad(*ts):
    return any(t.requires_grad for t in ts)


def _make(data, parents, backward_fn):
    if _needs_grad(*parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward_fn=backward_fn)
    return Tensor(data)


def _unbroadcast(grad, shape):
    """Sum a gradient back down to the broadcast operand's shape."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ValueError(f"cannot reduce grad {grad.shape} to {shape}")
    return out


def _check_broadcast(a, b):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ValueError(f"incompatible shapes {a.shape} and {b.shape}")


# -- arithmetic ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")

    def bwd(g):
        return [(a, g @ b.data.T), (b, a.data.T @ g)]

    return _make(a.data @ b.data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def bwd(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product (with row/column-vector broadcasting)."""
    _check_broadcast(a, b)

    def bwd(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return _make(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return [(a, g * c)]

    return _make(a.data * c, (a,), bwd)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        return [(a, g)]

    return _make(a.data + float(c), (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        return [(a, g * out_data)]

    return _make(out_data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value; mask the input first")

    def bwd(g):
        return [(a, g / a.data)]

    return _make(np.log(a.data), (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return [(a, g * mask)]

    return _make(a.data * mask, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))

    def bwd(g):
        return [(a, g * out_data * (1.0 - out_data))]

    return _make(out_data, (a,), bwd)


# -- reductions ---------------------------------------------------------

def reduce_sum(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        out_data = a.data.sum().reshape(1, 1)
    else:
        out_data = a.data.sum(axis=axis, keepdims=True)

    def bwd(g):
        return [(a, np.broadcast_to(g, a.shape).copy())]

    return _make(out_data, (a,), bwd)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.data.size
        out_data = a.data.mean().reshape(1, 1)
    else:
        n = a.shape[axis]
        out_data = a.data.mean(axis=axis, keepdims=True)

    def bwd(g):
        return [(a, np.broadcast_to(g, a.shape) / n)]

    return _make(out_data, (a,), bwd)


def row_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=1, keepdims=True)
        return [(a, out_data * (g - dot))]

    return _make(out_data, (a,), bwd)


def layer_norm_row(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization without learnable affine parameters."""
    mean = a.data.mean(axis=1, keepdims=True)
    var = a.data.var(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mean) * inv_std
    n = a.shape[1]

    def bwd(g):
        gm = g.mean(axis=1, keepdims=True)
        gx = (g * xhat).mean(axis=1, keepdims=True)
        return [(a, inv_std * (g - gm - xhat * gx))]

    return _make(xhat, (a,), bwd)


def pairwise_sq_dist(a: Tensor) -> Tensor:
    """D[i, j] = squared Euclidean distance between rows i and j."""
    sq = (a.data ** 2).sum(axis=1, keepdims=True)
    d = sq + sq.T - 2.0 * (a.data @ a.data.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)

    def bwd(g):
        s = g + g.T
        return [(a, 2.0 * (s.sum(axis=1, keepdims=True) * a.data - s @ a.data))]

    return _make(d, (a,), bwd)


# -- structure ----------------------------------------------------------

def transpose(a: Tensor) -> Tensor:
    def bwd(g):
        return [(a, g.T)]

    return _make(a.data.T.copy(), (a,), bwd)


def concat_cols(tensors) -> Tensor:
    tensors = list(tensors)
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.shape[0] != rows:
            raise ValueError("concat_cols needs matching row counts")
    widths = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return [(t, g[:, offsets[i]:offsets[i + 1]].copy()) for i, t in enumerate(tensors)]

    return _make(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), bwd)


def concat_rows(tensors) -> Tensor:
    tensors = list(tensors)
    cols = tensors[0].shape[1]
    for t in tensors:
        if t.shape[1] != cols:
            raise ValueError("concat_rows needs matching column counts")
    heights = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + heights)

    def bwd(g):
        return [(t, g[offsets[i]:offsets[i + 1], :].copy()) for i, t in enumerate(tensors)]

    return _make(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop, :] = g
        return [(a, full)]

    return _make(a.data[start:stop, :].copy(), (a,), bwd)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return [(a, full)]

    return _make(a.data[:, start:stop].copy(), (a,), bwd)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer indices."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(f"index out of range for table with {table.shape[0]} rows")

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return [(table, full)]

    return _make(table.data[idx, :].copy(), (table,), bwd)


def straight_through(relaxed: Tensor, hard_values) -> Tensor:
    """Forward the hard values, backward the relaxed path unchanged."""
    hard = np.asarray(hard_values, dtype=np.float64)
    if hard.shape != relaxed.shape:
        raise ValueError(f"hard values {hard.shape} must match relaxed {relaxed.shape}")

    def bwd(g):
        return [(relaxed, g.copy())]

    return _make(hard.copy(), (relaxed,), bwd)


# -- batch normalization ------------------------------------------------

class BatchNormState:
    """Running per-column statistics for batch normalization."""

    def __init__(self, width, momentum=0.1, eps=1e-5):
        self.running_mean = np.zeros((1, width))
        self.running_var = np.ones((1, width))
        self.momentum = momentum
        self.eps = eps

    def copy(self):
        other = BatchNormState(self.running_mean.shape[1], self.momentum, self.eps)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


def batch_norm_col(a: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Column-wise standardization; batch statistics while training,
    running statistics in evaluation mode (no learnable affine)."""
    if a.shape[1] != state.running_mean.shape[1]:
        raise ValueError(f"batch norm width mismatch: {a.shape[1]} vs {state.running_mean.shape[1]}")
    if training:
        mean = a.data.mean(axis=0, keepdims=True)
        var = a.data.var(axis=0, keepdims=True)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (a.data - mean) * inv_std

        def bwd(g):
            gm = g.mean(axis=0, keepdims=True)
            gx = (g * xhat).mean(axis=0, keepdims=True)
            return [(a, inv_std * (g - gm - xhat * gx))]

        return _make(xhat, (a,), bwd)

    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    out_data = (a.data - state.running_mean) * inv_std

    def bwd(g):
        return [(a, g * inv_std)]

    return _make(out_data, (a,), bwd)
