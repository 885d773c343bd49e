"""Reverse-mode automatic differentiation over numpy arrays.

Small tape-free engine: each op records a backward closure on the output
node, and ``backward`` walks the graph in reverse topological order.
Graph math runs in float64; parameter masters elsewhere stay float32.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus an optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node; fills ``grad`` on reachable leaves."""
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # Operator sugar used across the package. Scalars are treated as
    # constants (no gradient path).
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Iterable[Tensor], bwd) -> Tensor:
    out = Tensor(data)
    parents = tuple(p for p in parents if p.requires_grad)
    if _GRAD_ENABLED and parents:
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    return out


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), bwd)


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    data = np.power(a.data, exponent)

    def bwd(g):
        a._accumulate(g * exponent * np.power(a.data, exponent - 1.0))

    return _make(data, (a,), bwd)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        a._accumulate(g * data)

    return _make(data, (a,), bwd)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    data = a.data * mask

    def bwd(g):
        a._accumulate(g * mask)

    return _make(data, (a,), bwd)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), bwd)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    data = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def bwd(g):
        a._accumulate(g.transpose(inverse))

    return _make(data, (a,), bwd)


def take_rows(a, n: int) -> Tensor:
    """First ``n`` rows of a 2-D tensor (position-embedding slice)."""
    a = _as_tensor(a)
    data = a.data[:n]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[:n] = g
        a._accumulate(full)

    return _make(data, (a,), bwd)


def gather_rows(table, ids: np.ndarray) -> Tensor:
    """Embedding lookup: rows of ``table`` indexed by an integer array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    data = table.data[ids]

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _make(data, (table,), bwd)


def gather_pick(a, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Elements ``a[rows[i], cols[i]]`` of a 2-D tensor as a 1-D tensor."""
    a = _as_tensor(a)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    data = a.data[rows, cols]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        a._accumulate(full)

    return _make(data, (a,), bwd)


def softmax_last(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        a._accumulate(data * (g - dot))

    return _make(data, (a,), bwd)


def log_softmax_last(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def bwd(g):
        a._accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    return _make(data, (a,), bwd)


def logsumexp(a, axis=None) -> Tensor:
    """Numerically stable log-sum-exp along ``axis`` (or over all)."""
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True) if axis is not None else a.data.max()
    shifted = add(a, -np.asarray(m))
    s = tsum(exp(shifted), axis=axis)
    return add(log(s), np.squeeze(np.asarray(m), axis=axis) if axis is not None else m)
