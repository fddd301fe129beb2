"""Minimal reverse-mode autodiff over numpy arrays (internal use only).

A Tensor wraps a float64 ndarray and records enough of the computation
graph to backpropagate a scalar loss.  Coverage is deliberately small:
just the operations the controller, gates, and training losses need.
Analytic gradients produced here are validated against
linalg.fd_gradient in the test suite.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        if _grad_enabled:
            self._parents = parents
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    # -- graph bookkeeping -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_data = self.data + other.data

        def bwd(g, a=self, b=other):
            a._accum(_unbroadcast(g, a.data.shape))
            b._accum(_unbroadcast(g, b.data.shape))

        return Tensor(out_data, (self, other), bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g, a=self):
            a._accum(-g)

        return Tensor(-self.data, (self,), bwd)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_data = self.data * other.data

        def bwd(g, a=self, b=other):
            a._accum(_unbroadcast(g * b.data, a.data.shape))
            b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor(out_data, (self, other), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data

        def bwd(g, a=self, b=other):
            a._accum(_unbroadcast(g / b.data, a.data.shape))
            b._accum(_unbroadcast(-g * a.data / (b.data**2), b.data.shape))

        return Tensor(out_data, (self, other), bwd)

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        assert np.isscalar(p)
        out_data = self.data**p

        def bwd(g, a=self):
            a._accum(g * p * a.data ** (p - 1))

        return Tensor(out_data, (self,), bwd)

    def __matmul__(self, other):
        other = as_tensor(other)
        out_data = self.data @ other.data

        def bwd(g, a=self, b=other):
            ad, bd = a.data, b.data
            if ad.ndim == 1 and bd.ndim == 1:
                a._accum(g * bd)
                b._accum(g * ad)
                return
            if ad.ndim == 1:
                ad2 = ad[None, :]
                g2 = g[None, ...] if g.ndim == bd.ndim - 1 else g
                a._accum((g2 @ np.swapaxes(bd, -1, -2)).reshape(ad.shape))
                b._accum(_unbroadcast(np.swapaxes(ad2, -1, -2) @ g2, bd.shape))
                return
            if bd.ndim == 1:
                a._accum(_unbroadcast(g[..., :, None] @ bd[None, :], ad.shape))
                b._accum(_unbroadcast(np.swapaxes(ad, -1, -2) @ g[..., :, None], (bd.size, 1)).ravel())
                return
            a._accum(_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape))
            b._accum(_unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

        return Tensor(out_data, (self, other), bwd)

    # -- shape ops ----------------------------------------------------------

    @property
    def T(self):
        return self.transpose()

    def transpose(self, axes=None):
        out_data = np.transpose(self.data, axes)

        def bwd(g, a=self, axes=axes):
            if axes is None:
                a._accum(np.transpose(g))
            else:
                a._accum(np.transpose(g, np.argsort(axes)))

        return Tensor(out_data, (self,), bwd)

    def swapaxes(self, i, j):
        out_data = np.swapaxes(self.data, i, j)

        def bwd(g, a=self):
            a._accum(np.swapaxes(g, i, j))

        return Tensor(out_data, (self,), bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bwd(g, a=self):
            a._accum(g.reshape(a.data.shape))

        return Tensor(out_data, (self,), bwd)

    def __getitem__(self, idx):
        out_data = self.data[idx]

        def bwd(g, a=self, idx=idx):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor(out_data, (self,), bwd)

    # -- reductions and elementwise ------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape).copy())

        return Tensor(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        else:
            n = self.data.shape[axis] if np.isscalar(axis) else int(
                np.prod([self.data.shape[a] for a in axis])
            )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def exp(self):
        out_data = np.exp(self.data)

        def bwd(g, a=self, y=out_data):
            a._accum(g * y)

        return Tensor(out_data, (self,), bwd)

    def log(self):
        out_data = np.log(self.data)

        def bwd(g, a=self):
            a._accum(g / a.data)

        return Tensor(out_data, (self,), bwd)

    def tanh(self):
        out_data = np.tanh(self.data)

        def bwd(g, a=self, y=out_data):
            a._accum(g * (1.0 - y**2))

        return Tensor(out_data, (self,), bwd)

    def sqrt(self):
        out_data = np.sqrt(self.data)

        def bwd(g, a=self, y=out_data):
            a._accum(g * 0.5 / y)

        return Tensor(out_data, (self,), bwd)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    """A leaf that never receives gradient (wraps raw data)."""
    return Tensor(np.asarray(x, dtype=np.float64))


def where(cond, a, b):
    """Elementwise select on a boolean ndarray condition."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.where(cond, a.data, b.data)

    def bwd(g, a=a, b=b, cond=cond):
        a._accum(_unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        b._accum(_unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return Tensor(out_data, (a, b), bwd)

def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, tensors=tensors, splits=splits, axis=axis):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accum(piece)

    return Tensor(out_data, tuple(tensors), bwd)


def solve(a, b):
    """X = A^(-1) B for square A, with gradients for both operands."""
    a, b = as_tensor(a), as_tensor(b)
    x = np.linalg.solve(a.data, b.data)

    def bwd(g, a=a, b=b, x=x):
        gb = np.linalg.solve(a.data.T, g)
        a._accum(-gb @ x.T)
        b._accum(gb)

    return Tensor(x, (a, b), bwd)


def skew_matrix(upper, n):
    """Strictly-upper parameter vector -> dense skew-symmetric matrix."""
    upper = as_tensor(upper)
    iu = np.triu_indices(n, k=1)
    s = np.zeros((n, n))
    s[iu] = upper.data
    out_data = s - s.T

    def bwd(g, upper=upper, iu=iu):
        upper._accum(g[iu] - g.T[iu])

    return Tensor(out_data, (upper,), bwd)


def softmax(z, axis=-1):
    """Stable softmax; the max shift is detached (gradient-free by invariance)."""
    zmax = constant(np.max(z.data, axis=axis, keepdims=True))
    e = (z - zmax).exp()
    return e / e.sum(axis=axis, keepdims=True)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    # Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    return 0.5 * x * (1.0 + (_GELU_C * (x + 0.044715 * x**3)).tanh())


def cayley(skew_upper, n, q0):
    """Q = (I - S)(I + S)^(-1) Q0 with S built from the upper-triangle vector."""
    s = skew_matrix(skew_upper, n)
    eye = constant(np.eye(n))
    return (eye - s) @ solve(eye + s, q0)
