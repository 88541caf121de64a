"""A small reverse-mode differentiation tape over numpy arrays.

Only the primitives the solvers, the context blocks and the classifier head
need are provided. A :class:`Var` records its parents and a vector-Jacobian
product only when one of its inputs requires a gradient, so running on
constants costs nothing beyond the numpy work (this is how the one-step
mode keeps earlier solver iterations off the tape).
"""
from __future__ import annotations

import numpy as np

from .batchnorm import (
    BatchNormState,
    batchnorm_backward,
    batchnorm_backward_eval,
    batchnorm_forward,
)
from .kernels import EPS, ParameterError, ShapeError


class Var:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

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


def leaf(value, name=None) -> Var:
    """A differentiable input."""
    return Var(np.asarray(value), requires_grad=True, name=name)


def const(value) -> Var:
    if isinstance(value, Var):
        return Var(value.value)
    return Var(np.asarray(value))


def detach(v) -> Var:
    return const(v)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def value(x):
    return x.value if isinstance(x, Var) else x


def _node(out, inputs, vjp) -> Var:
    if any(p.requires_grad for p in inputs):
        return Var(out, tuple(inputs), vjp, True)
    return Var(out)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul: {a.value.shape} x {b.value.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        ga = _unbroadcast(g @ _swap(bv), av.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap(av) @ g, bv.shape) if b.requires_grad else None
        return ga, gb

    return _node(av @ bv, (a, b), vjp)


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _node(a.value + b.value, (a, b), vjp)


def sub(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _node(a.value - b.value, (a, b), vjp)


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value

    def vjp(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _node(av * bv, (a, b), vjp)


def div(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return _unbroadcast(g / bv, av.shape), gb

    return _node(out, (a, b), vjp)


def transpose(a) -> Var:
    a = _wrap(a)
    return _node(_swap(a.value), (a,), lambda g: (_swap(g),))


def reshape(a, shape) -> Var:
    a = _wrap(a)
    old = a.value.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def moveaxis(a, source, dest) -> Var:
    a = _wrap(a)
    return _node(np.moveaxis(a.value, source, dest), (a,), lambda g: (np.moveaxis(g, dest, source),))


def sum(a, axis=None, keepdims=False) -> Var:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def relu(a) -> Var:
    a = _wrap(a)
    mask = a.value > 0  # subgradient 0 at the kink
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Var:
    a = _wrap(a)
    out = np.tanh(a.value)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a, axis=-2, temperature=1.0) -> Var:
    """Softmax of ``a / temperature`` along ``axis`` (columns by default)."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    a = _wrap(a)
    z = a.value / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / temperature,)

    return _node(out, (a,), vjp)


def l2_normalize_columns(a) -> Var:
    a = _wrap(a)
    x = a.value
    n = np.sqrt((x * x).sum(axis=-2, keepdims=True))
    big = n > EPS
    den = np.where(big, n, EPS)
    out = x / den

    def vjp(g):
        xg = (x * g).sum(axis=-2, keepdims=True)
        # below the guard the map is x / EPS, a linear map
        return (g / den - np.where(big, x * xg / den**3, 0.0),)

    return _node(out, (a,), vjp)


def cosine(d, x) -> Var:
    d, x = _wrap(d), _wrap(x)
    if d.value.shape[-2] != x.value.shape[-2]:
        raise ShapeError(f"cosine: {d.value.shape} vs {x.value.shape}")
    return transpose(l2_normalize_columns(d)) @ l2_normalize_columns(x)


def solve(a, b) -> Var:
    """``a^{-1} b`` for (stacks of) symmetric positive-definite ``a``."""
    a, b = _wrap(a), _wrap(b)
    out = np.linalg.solve(a.value, b.value)

    def vjp(g):
        gb = np.linalg.solve(_swap(a.value), g)
        ga = -gb @ _swap(out) if a.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp)


def batchnorm(h, gamma, beta, state: BatchNormState) -> Var:
    """BN over axis -2 of ``h`` (channels); statistics pool every other axis."""
    h, gamma, beta = _wrap(h), _wrap(gamma), _wrap(beta)
    hv = h.value
    c = hv.shape[-2]
    flat = np.moveaxis(hv, -2, 0).reshape(c, -1)
    st = state if state.gamma is gamma.value else _with_affine(state, gamma.value, beta.value)
    out_flat, cache = batchnorm_forward(flat, st)
    if st is not state:
        state.running_mean, state.running_var = st.running_mean, st.running_var
    moved_shape = np.moveaxis(hv, -2, 0).shape
    out = np.moveaxis(out_flat.reshape(moved_shape), 0, -2)

    def vjp(g):
        gflat = np.moveaxis(g, -2, 0).reshape(c, -1)
        back = batchnorm_backward if cache.mode == "train" else batchnorm_backward_eval
        gin, ggamma, gbeta = back(gflat, cache)
        return np.moveaxis(gin.reshape(moved_shape), 0, -2), ggamma, gbeta

    return _node(out, (h, gamma, beta), vjp)


def _with_affine(state, gamma, beta):
    st = state.copy()
    st.gamma, st.beta = gamma, beta
    return st


def softmax_cross_entropy(logits, labels: np.ndarray) -> Var:
    """Mean cross-entropy; ``logits`` has classes on axis -2, ``labels`` the rest."""
    logits = _wrap(logits)
    z = logits.value
    z = z - z.max(axis=-2, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-2, keepdims=True))
    onehot = np.moveaxis(np.eye(z.shape[-2])[labels], -1, -2)
    count = labels.size
    loss = -(onehot * logp).sum() / count

    def vjp(g):
        return (g * (np.exp(logp) - onehot) / count,)

    return _node(np.asarray(loss), (logits,), vjp)


def _toposort(outputs):
    order, seen = [], set()
    stack = [(v, False) for v in outputs if v.requires_grad]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(outputs, cotangents, wrt):
    """Vector-Jacobian product: returns d<cotangents, outputs>/d(wrt) per entry of ``wrt``.

    Inputs unreachable from the outputs receive zeros. The tape is left
    untouched, so the same graph may be swept repeatedly.
    """
    if isinstance(outputs, Var):
        outputs, cotangents = [outputs], [cotangents]
    grads = {}
    for out, ct in zip(outputs, cotangents):
        if out.requires_grad:
            ct = np.broadcast_to(np.asarray(ct, dtype=out.value.dtype), out.value.shape)
            grads[id(out)] = grads.get(id(out), 0) + ct
    for node in reversed(_toposort(outputs)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    result = []
    for w in wrt:
        g = grads.get(id(w))
        result.append(np.zeros_like(w.value) if g is None else np.asarray(g).reshape(w.value.shape))
    return result


def tape_size(outputs) -> int:
    """Number of recorded nodes reachable from ``outputs``."""
    if isinstance(outputs, Var):
        outputs = [outputs]
    return len(_toposort(outputs))
