"""Reverse-mode tape over numpy arrays.

Supports exactly the operations the package's maps and losses need; this is
not a general autodiff for user graphs. Backward traversal is iterative, so
long recurrent unrolls do not hit the recursion limit.
"""

from __future__ import annotations

import numpy as np


class Var:
    """A tape node: numpy payload plus parents and a backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    # Make `ndarray <op> Var` defer to Var's reflected operators instead of
    # numpy broadcasting over a Python object.
    __array_ufunc__ = None

    def __init__(self, data, parents=(), bwd=None, requires_grad=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._bwd = bwd
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    # -- operators ---------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64), requires_grad=False)


def _acc(node: Var, g: np.ndarray):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -------------------------------------------------------------


def add(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data + b.data, (a, b))
    out._bwd = lambda g: (_acc(a, _unbroadcast(g, a.shape)),
                          _acc(b, _unbroadcast(g, b.shape)))
    return out


def sub(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data - b.data, (a, b))
    out._bwd = lambda g: (_acc(a, _unbroadcast(g, a.shape)),
                          _acc(b, _unbroadcast(-g, b.shape)))
    return out


def mul(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data * b.data, (a, b))
    out._bwd = lambda g: (_acc(a, _unbroadcast(g * b.data, a.shape)),
                          _acc(b, _unbroadcast(g * a.data, b.shape)))
    return out


def div(a, b):
    a, b = as_var(a), as_var(b)
    out = Var(a.data / b.data, (a, b))

    def bwd(g):
        _acc(a, _unbroadcast(g / b.data, a.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    out._bwd = bwd
    return out


def pow_const(a, p):
    a = as_var(a)
    out = Var(a.data ** p, (a,))
    out._bwd = lambda g: _acc(a, g * p * a.data ** (p - 1))
    return out


def matmul(a, b):
    a, b = as_var(a), as_var(b)
    if a.ndim == 1 or b.ndim == 1:
        # Lift vectors to matrices, then restore numpy's matmul shape.
        true_shape = np.matmul(a.data, b.data).shape
        a2 = a.reshape((1, a.shape[0])) if a.ndim == 1 else a
        b2 = b.reshape((b.shape[0], 1)) if b.ndim == 1 else b
        return matmul(a2, b2).reshape(true_shape)
    out = Var(a.data @ b.data, (a, b))

    def bwd(g):
        _acc(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
        _acc(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    out._bwd = bwd
    return out


def transpose(a):
    a = as_var(a)
    out = Var(a.data.swapaxes(-1, -2), (a,))
    out._bwd = lambda g: _acc(a, g.swapaxes(-1, -2))
    return out


def reshape(a, shape):
    a = as_var(a)
    out = Var(a.data.reshape(shape), (a,))
    out._bwd = lambda g: _acc(a, g.reshape(a.shape))
    return out


# -- nonlinearities ---------------------------------------------------------


def exp(a):
    a = as_var(a)
    out = Var(np.exp(a.data), (a,))
    out._bwd = lambda g: _acc(a, g * out.data)
    return out


def log(a):
    a = as_var(a)
    out = Var(np.log(a.data), (a,))
    out._bwd = lambda g: _acc(a, g / a.data)
    return out


def tanh(a):
    a = as_var(a)
    out = Var(np.tanh(a.data), (a,))
    out._bwd = lambda g: _acc(a, g * (1.0 - out.data * out.data))
    return out


def sigmoid(a):
    a = as_var(a)
    out = Var(1.0 / (1.0 + np.exp(-a.data)), (a,))
    out._bwd = lambda g: _acc(a, g * out.data * (1.0 - out.data))
    return out


def softplus(a):
    a = as_var(a)
    out = Var(np.logaddexp(0.0, a.data), (a,))
    out._bwd = lambda g: _acc(a, g / (1.0 + np.exp(-a.data)))
    return out


def relu(a):
    a = as_var(a)
    out = Var(np.maximum(a.data, 0.0), (a,))
    out._bwd = lambda g: _acc(a, g * (a.data > 0))
    return out


def vabs(a):
    a = as_var(a)
    out = Var(np.abs(a.data), (a,))
    out._bwd = lambda g: _acc(a, g * np.sign(a.data))
    return out


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is identity inside the closed interval."""
    a = as_var(a)
    out = Var(np.clip(a.data, lo, hi), (a,))
    out._bwd = lambda g: _acc(a, g * ((a.data >= lo) & (a.data <= hi)))
    return out


# -- reductions and restructuring -------------------------------------------


def vsum(a, axis=None, keepdims=False):
    a = as_var(a)
    out = Var(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape).copy())

    out._bwd = bwd
    return out


def vmean(a, axis=None, keepdims=False):
    a = as_var(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def concat(parts, axis=0):
    parts = [as_var(p) for p in parts]
    out = Var(np.concatenate([p.data for p in parts], axis=axis), tuple(parts))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _acc(p, g[tuple(sl)])

    out._bwd = bwd
    return out


def stack(parts, axis=0):
    parts = [as_var(p) for p in parts]
    out = Var(np.stack([p.data for p in parts], axis=axis), tuple(parts))

    def bwd(g):
        for i, p in enumerate(parts):
            _acc(p, np.take(g, i, axis=axis))

    out._bwd = bwd
    return out


def _is_fancy(key) -> bool:
    if isinstance(key, np.ndarray):
        return True
    if isinstance(key, tuple):
        return any(isinstance(k, np.ndarray) for k in key)
    return False


def getitem(a, key):
    a = as_var(a)
    out = Var(a.data[key], (a,))
    fancy = _is_fancy(key)  # repeated indices must accumulate

    def bwd(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] += g
        _acc(a, full)

    out._bwd = bwd
    return out


def take_rows(a, idx):
    """Gather rows along axis 0 with an integer index array."""
    idx = np.asarray(idx)
    return getitem(a, idx)


# -- softmax family ----------------------------------------------------------


def softmax(a, axis=-1):
    a = as_var(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Var(y, (a,))

    def bwd(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _acc(a, y * (g - inner))

    out._bwd = bwd
    return out


def log_softmax(a, axis=-1):
    a = as_var(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = Var(y, (a,))

    def bwd(g):
        _acc(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    out._bwd = bwd
    return out


def stop_gradient(a) -> Var:
    """Forward identity; contributes zero to every gradient."""
    a = as_var(a)
    return Var(a.data, (), None, requires_grad=False)
