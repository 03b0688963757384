"""Reverse-mode automatic differentiation over f64 numpy arrays.

A ``Tape`` records every primitive applied while it is active, in creation
order.  ``Tape.backward`` replays that record exactly reversed, so gradient
accumulation order is fixed and runs are reproducible bit for bit.  Ops
called with no active tape compute values only, which doubles as the
inference fast path.

Error policy: an op that would produce NaN or Inf raises ``NumericError``
instead of propagating silent garbage; ``log`` checks its domain before
evaluating.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import NumericError

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._nodes = []
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, out, seed=None):
        """Seed ``out.grad`` and push gradients to every recorded parent.

        ``out`` must be scalar unless an explicit seed array is given.
        A tape can only be replayed once.
        """
        if self._used:
            raise RuntimeError("tape already replayed")
        self._used = True
        if not out.requires_grad:
            raise ValueError("output does not depend on any tracked tensor")
        if seed is None:
            if out.data.size != 1:
                raise ValueError("backward needs a scalar output or an explicit seed")
            seed = np.ones_like(out.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != out.data.shape:
                raise ValueError("seed shape %s does not match output %s"
                                 % (seed.shape, out.data.shape))
        out.grad = seed
        for node in reversed(self._nodes):
            g = node.grad
            if g is None:
                continue
            node._backward(g)
            node.grad = None  # intermediate grads are consumed, leaves keep theirs


class Tensor:
    """f64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialised with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return "Tensor(shape=%s, grad=%s)" % (self.data.shape, self.requires_grad)

    # small operator sugar; the named functions below are the real API
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError("%s produced non-finite values" % what)
    return arr


def _make(data, parents, backward):
    """Build an op output; record it when a tape is active and needed."""
    track = _ACTIVE_TAPE is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = track
    out._backward = None
    if track:
        out._backward = backward
        _ACTIVE_TAPE._nodes.append(out)
    return out


def _accum(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ------------------------------------------------------------------ pointwise

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    data = _finite(a.data * b.data, "mul")

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def neg(a):
    a = _wrap(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def scale(a, c):
    """Multiply by a python constant; the constant carries no gradient."""
    a = _wrap(a)
    c = float(c)
    data = _finite(a.data * c, "scale")

    def backward(g):
        _accum(a, g * c)

    return _make(data, (a,), backward)


def exp(a):
    a = _wrap(a)
    with np.errstate(over="ignore"):
        data = _finite(np.exp(a.data), "exp")

    def backward(g):
        _accum(a, g * data)

    return _make(data, (a,), backward)


def log(a):
    a = _wrap(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(data, (a,), backward)


def tanh(a):
    a = _wrap(a)
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def softplus(a):
    a = _wrap(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        # d softplus = sigmoid, in an overflow-safe form
        _accum(a, g * (0.5 * (1.0 + np.tanh(0.5 * a.data))))

    return _make(data, (a,), backward)


def log_softplus(a):
    """log(softplus(a)), stable over the whole real line.

    The naive composition underflows to log(0) once a < -745; here the
    negative tail uses the identity log(log(1 + e^a)) -> a as a -> -inf,
    so learned log-scales survive arbitrarily harsh excursions and the
    gradient stays finite (it tends to 1 on that tail).
    """
    a = _wrap(a)
    x = a.data
    neg = x < -30.0
    sp = np.logaddexp(0.0, np.where(neg, 0.0, x))
    data = np.where(neg, x, np.log(sp))

    def backward(g):
        # d/dx = sigmoid(x) / softplus(x); exactly 1 in the deep negative tail
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        _accum(a, g * np.where(neg, 1.0, sig / sp))

    return _make(data, (a,), backward)


def relu(a):
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0.0))

    return _make(data, (a,), backward)


def square(a):
    a = _wrap(a)
    data = _finite(a.data * a.data, "square")

    def backward(g):
        _accum(a, g * (2.0 * a.data))

    return _make(data, (a,), backward)


# -------------------------------------------------------------- contractions

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2d operands")
    data = _finite(a.data @ b.data, "matmul")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def conv2d(x, w, stride=1, padding=0):
    x, w = _wrap(x), _wrap(w)
    data = _finite(kernels.conv2d_forward(x.data, w.data, stride, padding), "conv2d")
    k = w.data.shape[2]
    x_shape = x.data.shape

    def backward(g):
        if x.requires_grad:
            _accum(x, kernels.conv2d_grad_input(g, w.data, x_shape, stride, padding))
        if w.requires_grad:
            _accum(w, kernels.conv2d_grad_weight(x.data, g, k, stride, padding))

    return _make(data, (x, w), backward)


# ----------------------------------------------------------------- reductions

def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = _wrap(a)
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _make(data, (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _wrap(a)
    axes = _axis_tuple(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.data.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(gg, a.data.shape) / n)

    return _make(data, (a,), backward)


def logsumexp(a, axis):
    a = _wrap(a)
    ax = _axis_tuple(axis, a.ndim)
    if len(ax) != 1:
        raise ValueError("logsumexp reduces one axis")
    ax = ax[0]
    m = a.data.max(axis=ax, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=ax, keepdims=True)
    data = np.squeeze(m + np.log(total), axis=ax)
    soft = shifted / total

    def backward(g):
        _accum(a, np.expand_dims(g, ax) * soft)

    return _make(data, (a,), backward)


def logsoftmax(a, axis):
    a = _wrap(a)
    ax = _axis_tuple(axis, a.ndim)[0]
    m = a.data.max(axis=ax, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def backward(g):
        _accum(a, g - soft * g.sum(axis=ax, keepdims=True))

    return _make(data, (a,), backward)


def max(a, axis=None):  # noqa: A001 - mirrors numpy naming
    """Max reduction; ties route the gradient to the first position."""
    a = _wrap(a)
    if axis is None:
        data = a.data.max()
        idx = np.unravel_index(np.argmax(a.data), a.data.shape)

        def backward(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

        return _make(np.asarray(data), (a,), backward)

    ax = _axis_tuple(axis, a.ndim)[0]
    data = a.data.max(axis=ax)
    arg = np.argmax(a.data, axis=ax)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), ax)
        _accum(a, full)

    return _make(data, (a,), backward)


# ------------------------------------------------------------- rearrangement

def reshape(a, shape):
    a = _wrap(a)
    orig = a.data.shape

    def backward(g):
        _accum(a, g.reshape(orig))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes):
    a = _wrap(a)
    inverse = np.argsort(axes)

    def backward(g):
        _accum(a, np.ascontiguousarray(g.transpose(inverse)))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def narrow(a, axis, start, length):
    """Contiguous slice along one axis."""
    a = _wrap(a)
    ax = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    return _make(np.ascontiguousarray(a.data[index]), (a,), backward)


def concat(parts, axis):
    parts = [_wrap(p) for p in parts]
    ax = axis % parts[0].ndim
    sizes = [p.data.shape[ax] for p in parts]
    data = np.concatenate([p.data for p in parts], axis=ax)

    def backward(g):
        start = 0
        index = [slice(None)] * g.ndim
        for p, s in zip(parts, sizes):
            index[ax] = slice(start, start + s)
            _accum(p, np.ascontiguousarray(g[tuple(index)]))
            start += s

    return _make(data, tuple(parts), backward)


# ------------------------------------------------------------ gradient check

def gradcheck(fn, tensors, eps=1e-5):
    """Max blended error between tape gradients and central differences.

    The error for one component is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-6), so it reads as a relative error
    for O(1) gradients and stays bounded for vanishing ones.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        out = fn(*tensors)
    tape.backward(out)
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(fn(*tensors).data)
            flat[i] = keep - eps
            lo = float(fn(*tensors).data)
            flat[i] = keep
            numeric[i] = (hi - lo) / (2.0 * eps)
        numeric = numeric.reshape(t.data.shape)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        err = float(np.max(np.abs(analytic - numeric) / denom))
        if err > worst:
            worst = err
    return worst
