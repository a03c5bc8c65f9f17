"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the handful of operations the models need: elementwise arithmetic,
matmul, transpose, tanh / logistic, square, full sum, and concatenation.
Network forward code is written against plain operators plus the dispatching
helpers below, so the same code runs on raw ndarrays (fast inference path)
and on Tensors (training path).
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad, shape):
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    """Node in the backward graph; ``value`` is always a float64 ndarray."""

    __slots__ = ("value", "grad", "_parents", "_bwd", "_grad_owned")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, value, _parents=(), _bwd=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self._parents = _parents
        self._bwd = _bwd
        self._grad_owned = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def _accum(self, g):
        # the first incoming gradient may be shared with other nodes; only
        # accumulate in place once this node owns a private buffer
        if self.grad is None:
            self.grad = g
        elif self._grad_owned and isinstance(self.grad, np.ndarray) \
                and self.grad.shape == np.shape(g):
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self):
        """Reverse accumulation from this (scalar) node."""
        if self.value.size != 1:
            raise ValueError("backward() expects a scalar loss node")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        a, b = self.value, value_of(other)
        if isinstance(other, Tensor):
            def bwd(g):
                self._accum(_unbroadcast(g, a.shape))
                other._accum(_unbroadcast(g, b.shape))
            return Tensor(a + b, (self, other), bwd)

        def bwd(g):
            self._accum(_unbroadcast(g, a.shape))
        return Tensor(a + b, (self,), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accum(-g)
        return Tensor(-self.value, (self,), bwd)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        a, b = self.value, value_of(other)
        if isinstance(other, Tensor):
            def bwd(g):
                self._accum(_unbroadcast(g * b, a.shape))
                other._accum(_unbroadcast(g * a, b.shape))
            return Tensor(a * b, (self, other), bwd)

        def bwd(g):
            self._accum(_unbroadcast(g * b, a.shape))
        return Tensor(a * b, (self,), bwd)

    __rmul__ = __mul__

    def __matmul__(self, other):
        a, b = self.value, value_of(other)
        if isinstance(other, Tensor):
            def bwd(g):
                self._accum(g @ b.T)
                other._accum(a.T @ g)
            return Tensor(a @ b, (self, other), bwd)

        def bwd(g):
            self._accum(g @ b.T)
        return Tensor(a @ b, (self,), bwd)

    def __rmatmul__(self, other):
        a = np.asarray(other)
        b = self.value

        def bwd(g):
            self._accum(a.T @ g)
        return Tensor(a @ b, (self,), bwd)

    @property
    def T(self):
        def bwd(g):
            self._accum(g.T)
        return Tensor(self.value.T, (self,), bwd)


def value_of(x):
    """Underlying ndarray of a Tensor, or x coerced to an array."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def tanh(x):
    if isinstance(x, Tensor):
        y = np.tanh(x.value)

        def bwd(g):
            x._accum(g * (1.0 - y * y))
        return Tensor(y, (x,), bwd)
    return np.tanh(x)


def _stable_sigmoid(x):
    # exp overflow for very negative x saturates to the correct limit 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x):
    if isinstance(x, Tensor):
        y = _stable_sigmoid(x.value)

        def bwd(g):
            x._accum(g * y * (1.0 - y))
        return Tensor(y, (x,), bwd)
    return _stable_sigmoid(np.asarray(x, dtype=float))


def square(x):
    if isinstance(x, Tensor):
        def bwd(g):
            x._accum(g * (2.0 * x.value))
        return Tensor(x.value * x.value, (x,), bwd)
    x = np.asarray(x)
    return x * x


def ssum(x):
    """Sum over all entries, to a scalar."""
    if isinstance(x, Tensor):
        shape = x.value.shape

        def bwd(g):
            x._accum(np.broadcast_to(g, shape))
        return Tensor(x.value.sum(), (x,), bwd)
    return np.asarray(x).sum()


def concat(parts, axis=-1):
    """Concatenate a mix of Tensors and ndarrays along an axis."""
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate(parts, axis=axis)
    values = [value_of(p) for p in parts]
    split_at = np.cumsum([v.shape[axis] for v in values])[:-1]
    tensors = [(i, p) for i, p in enumerate(parts) if isinstance(p, Tensor)]

    def bwd(g):
        pieces = np.split(g, split_at, axis=axis)
        for i, p in tensors:
            p._accum(pieces[i])
    return Tensor(np.concatenate(values, axis=axis),
                  tuple(p for _, p in tensors), bwd)


def linear2(x, Wt, h, Ut, b):
    """Fused x @ Wt + h @ Ut + b as a single graph node (training hot path)."""
    xv, Wv, hv, Uv, bv = (value_of(t) for t in (x, Wt, h, Ut, b))
    out = xv @ Wv + hv @ Uv + bv
    parents = tuple(t for t in (x, Wt, h, Ut, b) if isinstance(t, Tensor))
    if not parents:
        return out

    def bwd(g):
        if isinstance(x, Tensor):
            x._accum(g @ Wv.T)
        if isinstance(Wt, Tensor):
            Wt._accum(xv.T @ g)
        if isinstance(h, Tensor):
            h._accum(g @ Uv.T)
        if isinstance(Ut, Tensor):
            Ut._accum(hv.T @ g)
        if isinstance(b, Tensor):
            b._accum(_unbroadcast(g, bv.shape))
    return Tensor(out, parents, bwd)


def split(x, n_parts, axis=-1):
    """Split into equal parts along an axis; inverse of concat."""
    if not isinstance(x, Tensor):
        return np.split(np.asarray(x), n_parts, axis=axis)
    shape = x.value.shape
    size = shape[axis] // n_parts
    outs = []
    for i in range(n_parts):
        sl = [slice(None)] * len(shape)
        sl[axis] = slice(i * size, (i + 1) * size)
        sl = tuple(sl)

        def bwd(g, sl=sl):
            full = np.zeros(shape)
            full[sl] = g
            x._accum(full)
        outs.append(Tensor(x.value[sl], (x,), bwd))
    return outs
