"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray and, while gradients are enabled, links to its
parents through a backward closure. backward() on a scalar loss walks the
tape in reverse topological order and accumulates into .grad of every
reachable tensor that requires gradients (callers zero grads between steps).

float32 is the working precision; float64 is used by the gradient checker.
Only the operators the model needs exist here and in cmoe.ops.
"""

from __future__ import annotations

import contextlib

import numpy as np

from cmoe.errors import ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (evaluation mode forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    # -- graph bookkeeping ---------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), -self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _make(data: np.ndarray, parents, backward) -> Tensor:
    """Wrap an op result, recording the tape when gradients are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitive operators ----------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """numpy @ semantics: equal batch dims, or a 2-D operand broadcast."""
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"batched matmul needs equal batch dims, got {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(out_data, (a, b), backward)


def reshape(t: Tensor, shape) -> Tensor:
    out_data = t.data.reshape(shape)

    def backward(g):
        _accum(t, g.reshape(t.shape))

    return _make(out_data, (t,), backward)


def flatten(t: Tensor) -> Tensor:
    """[N, ...] -> [N, prod(...)]."""
    return reshape(t, (t.shape[0], -1))


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = t.data.transpose(axes)

    def backward(g):
        _accum(t, g.transpose(inv))

    return _make(out_data, (t,), backward)


def sum_(t: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(t, np.broadcast_to(g, t.shape).astype(t.dtype, copy=False))

    return _make(out_data, (t,), backward)


def mean(t: Tensor, axis=None, keepdims=False) -> Tensor:
    count = t.size if axis is None else t.shape[axis]
    return mul(sum_(t, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(t: Tensor) -> Tensor:
    out_data = np.maximum(t.data, 0)

    def backward(g):
        _accum(t, g * (t.data > 0))

    return _make(out_data, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    """Elementwise 1 / (1 + exp(-x)), overflow-safe on both tails."""
    x = t.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accum(t, g * out_data * (1.0 - out_data))

    return _make(out_data, (t,), backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis; rows sum to 1."""
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(t, out_data * (g - dot))

    return _make(out_data, (t,), backward)


def gather_rows(t: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds them back."""
    idx = np.asarray(idx, dtype=np.int64)
    out_data = t.data[idx]

    def backward(g):
        buf = np.zeros_like(t.data)
        np.add.at(buf, idx, g)
        _accum(t, buf)

    return _make(out_data, (t,), backward)


def scatter_rows(rows: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Add rows at positions idx of an otherwise-zero [n_rows, D] tensor.

    Duplicate indices accumulate, so the op stays consistent with its own
    gradient; dispatch only ever passes unique positions.
    """
    idx = np.asarray(idx, dtype=np.int64)
    out_data = np.zeros((n_rows,) + rows.shape[1:], dtype=rows.dtype)
    np.add.at(out_data, idx, rows.data)

    def backward(g):
        _accum(rows, g[idx])

    return _make(out_data, (rows,), backward)
