"""A small dense-tensor kernel with reverse-mode differentiation.

Only the operations the surrogate needs are provided.  Each op records its
inputs and a closure that pushes the output gradient back to them;
:meth:`Tensor.backward` walks the tape in reverse topological order.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor({self.name or ''}{self.data.shape})"

    def _accum(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g

    def backward(self, grad=None):
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents if id(p) not in seen)
        self.grad = np.ones_like(self.data) if grad is None else grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, _parents=(a, b), _backward=back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return Tensor(a.data - b.data, _parents=(a, b), _backward=back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, _parents=(a, b), _backward=back)


def matmul(a, b) -> Tensor:
    """Batched matmul; a 2-D ``b`` is a weight shared across the leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    shared = b.data.ndim == 2 and a.data.ndim > 2
    if shared:
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        out = a.data @ b.data

    def back(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accum((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accum(a2.T @ g2)
            return
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(out, _parents=(a, b), _backward=back)


def reshape(a: Tensor, shape) -> Tensor:
    def back(g):
        a._accum(g.reshape(a.shape))

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=back)


def transpose(a: Tensor, axes) -> Tensor:
    """Permute axes; the result is materialised contiguously."""
    inv = np.argsort(axes)

    def back(g):
        a._accum(np.ascontiguousarray(g.transpose(inv)))

    return Tensor(np.ascontiguousarray(a.data.transpose(axes)), _parents=(a,), _backward=back)


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""

    def back(g):
        out = np.zeros_like(a.data)
        out[index] = g
        a._accum(out)

    return Tensor(a.data[index], _parents=(a,), _backward=back)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape).copy())

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=back)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g):
        a._accum(np.full(a.shape, g / n))

    return Tensor(a.data.mean(), _parents=(a,), _backward=back)


def square(a: Tensor) -> Tensor:
    def back(g):
        a._accum(2 * a.data * g)

    return Tensor(a.data * a.data, _parents=(a,), _backward=back)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1 + erf(x / _SQRT2))

    def back(g):
        a._accum(g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)))

    return Tensor(x * cdf, _parents=(a,), _backward=back)


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1 + np.tanh(0.5 * a.data))

    def back(g):
        a._accum(g * y * (1 - y))

    return Tensor(y, _parents=(a,), _backward=back)


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; every row needs one True."""
    s = a.data + np.where(mask, 0.0, -np.inf)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        a._accum(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return Tensor(y, _parents=(a,), _backward=back)


def masked_max(a: Tensor, mask: np.ndarray, axis: int = 1) -> Tensor:
    """Max over ``axis`` among rows where ``mask`` holds; ties go to the lowest index."""
    m = np.expand_dims(mask, -1) if mask.ndim < a.data.ndim else mask
    x = np.where(m, a.data, -np.inf)
    idx = np.argmax(x, axis=axis)
    y = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        out = np.zeros_like(a.data)
        np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        a._accum(out)

    return Tensor(y, _parents=(a,), _backward=back)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        for p, gp in zip(parts, np.split(g, cuts, axis=axis)):
            p._accum(gp)

    return Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts),
                  _backward=back)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mask: np.ndarray | None = None,
               eps: float = 1e-5,
               running: tuple[np.ndarray, np.ndarray] | None = None, training: bool = True,
               momentum: float = 0.1) -> Tensor:
    """Feature-wise normalisation over the rows of ``x`` selected by ``mask`` (all by default).

    In training mode the batch statistics are used (biased variance) and
    ``running`` (mean, var) arrays are updated in place.  Otherwise the
    running statistics are used as constants.
    """
    f = x.shape[-1]
    flat = x.data.reshape(-1, f)
    w = np.ones((flat.shape[0], 1)) if mask is None else mask.reshape(-1, 1).astype(flat.dtype)
    if training:
        n = int(w.sum())
        mu = (flat * w).sum(axis=0) / n
        var = (((flat - mu) ** 2) * w).sum(axis=0) / n
        if running is not None:
            r_mean, r_var = running
            r_mean *= 1 - momentum
            r_mean += momentum * mu
            r_var *= 1 - momentum
            r_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * inv
    y = (xhat * gamma.data + beta.data).reshape(x.shape)

    def back(g):
        g = g.reshape(-1, f) * w
        gamma._accum((g * xhat).sum(axis=0))
        beta._accum(g.sum(axis=0))
        dxhat = g * gamma.data
        if training:
            s1 = dxhat.sum(axis=0)
            s2 = (dxhat * xhat).sum(axis=0)
            dx = inv * (dxhat - (s1 + xhat * s2) / n) * w
        else:
            dx = dxhat * inv
        x._accum(dx.reshape(x.shape))

    return Tensor(y, _parents=(x, gamma, beta), _backward=back)


# ------------------------------------------------------------ segment ops
# Rows of the first axis are grouped into contiguous segments given by their
# start offsets ``starts`` and the per-row segment id ``seg``.

def _scatter_matrix(idx: np.ndarray, n: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))


def gather(a: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``a[idx]``; the backward pass scatter-adds."""

    def back(g):
        S = _scatter_matrix(idx, a.shape[0])
        a._accum(np.asarray(S @ g.reshape(g.shape[0], -1)).reshape(a.shape))

    return Tensor(a.data[idx], _parents=(a,), _backward=back)


def segment_sum(a: Tensor, starts: np.ndarray, seg: np.ndarray) -> Tensor:
    def back(g):
        a._accum(g[seg])

    return Tensor(np.add.reduceat(a.data, starts, axis=0), _parents=(a,), _backward=back)


def segment_softmax(a: Tensor, starts: np.ndarray, seg: np.ndarray) -> Tensor:
    """Softmax over the rows of each (non-empty) segment."""
    x = a.data - np.maximum.reduceat(a.data, starts, axis=0)[seg]
    e = np.exp(x)
    y = e / np.add.reduceat(e, starts, axis=0)[seg]

    def back(g):
        gy = g * y
        a._accum(gy - y * np.add.reduceat(gy, starts, axis=0)[seg])

    return Tensor(y, _parents=(a,), _backward=back)


def segment_max(a: Tensor, starts: np.ndarray, seg: np.ndarray) -> Tensor:
    """Per-segment max of each column; ties go to the lowest row."""
    x = a.data
    mx = np.maximum.reduceat(x, starts, axis=0)
    rows = np.arange(x.shape[0]).reshape((-1,) + (1,) * (x.ndim - 1))
    cand = np.where(x == mx[seg], rows, x.shape[0])
    arg = np.minimum.reduceat(cand, starts, axis=0)

    def back(g):
        out = np.zeros_like(x)
        np.put_along_axis(out, arg, g, axis=0)
        a._accum(out)

    return Tensor(mx, _parents=(a,), _backward=back)
