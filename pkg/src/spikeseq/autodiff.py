"""Tape-based reverse-mode autodiff over dense float64 numpy arrays.

A Tensor remembers its parents and a backward closure; calling
``backward()`` on a scalar loss topologically sorts the graph and
accumulates gradients into every leaf with ``requires_grad=True``.
Custom gradient rules (surrogate spikes, straight-through ternarization,
SSM kernels) plug in through :func:`custom_op`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (eval-mode forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents if _grad_enabled else ()
        self._backward = backward if _grad_enabled else None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return multiply(_as_tensor(other), self)

    def __neg__(self):
        return multiply(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, idx):
        return tslice(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    # -- reverse pass --------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        topo, seen = [], set()

        def visit(t):
            if id(t) in seen:
                return
            seen.add(id(t))
            for p in t._parents:
                visit(p)
            topo.append(t)

        visit(self)
        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.requires_grad and not t._parents:
                t.grad = g if t.grad is None else t.grad + g
            if t._backward is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg.copy() if pg is g else pg


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs(*tensors):
    return any(t.requires_grad for t in tensors)


def custom_op(inputs, out_data, backward_fn, op=""):
    """Record an op with an explicit vector-Jacobian rule.

    ``backward_fn(g)`` must return one gradient array (or None) per input,
    in order. This is the registration point for surrogate and
    straight-through rules.
    """
    inputs = tuple(inputs)
    return Tensor(out_data, requires_grad=_needs(*inputs), parents=inputs,
                  backward=backward_fn, op=op)


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic --------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        (a, b), a.data + b.data,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        op="add")


def subtract(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        (a, b), a.data - b.data,
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        op="subtract")


def multiply(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return custom_op(
        (a, b), a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.data.shape),
                   _unbroadcast(g * a.data, b.data.shape)),
        op="multiply")


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    return custom_op(
        (a, b), a.data @ b.data,
        lambda g: (g @ b.data.T, a.data.T @ g),
        op="matmul")


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return custom_op((a,), a.data.T.copy(), lambda g: (g.T.copy(),), op="transpose")


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape
    return custom_op((a,), a.data.reshape(shape), lambda g: (g.reshape(old),), op="reshape")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return custom_op(tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis),
                     bwd, op="concat")


def tslice(a, idx):
    a = _as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return custom_op((a,), out.copy(), bwd, op="slice")


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return custom_op((a,), out, bwd, op="sum")


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return custom_op((a,), out, bwd, op="mean")


# -- elementwise nonlinear --------------------------------------------

def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return custom_op((a,), out, lambda g: (g * out,), op="exp")


def log(a):
    a = _as_tensor(a)
    return custom_op((a,), np.log(a.data), lambda g: (g / a.data,), op="log")


def erf(a):
    a = _as_tensor(a)
    return custom_op(
        (a,), _erf(a.data),
        lambda g: (g * (2.0 / math.sqrt(math.pi)) * np.exp(-a.data ** 2),),
        op="erf")


def logistic(a):
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return custom_op((a,), out, lambda g: (g * out * (1.0 - out),), op="logistic")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return custom_op((a,), a.data * mask, lambda g: (g * mask,), op="relu")


# -- regularization / normalization -----------------------------------

def dropout(a, p, training, rng):
    """Inverted dropout; identity when ``p == 0`` or in eval mode."""
    a = _as_tensor(a)
    if not training or p == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return custom_op((a,), a.data * mask, lambda g: (g * mask,), op="dropout")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale/shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (gx - m1 - xhat * m2)
        return (dx, dgamma, dbeta)

    return custom_op((x, gamma, beta), out, bwd, op="layer_norm")


class BatchNormState:
    """Running mean/var for one feature axis (last axis of B×L×H)."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5):
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x, gamma, beta, state, training):
    """Per-feature normalization across all leading axes (batch × time)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    lead = tuple(range(x.data.ndim - 1))
    if training:
        mu = x.data.mean(axis=lead)
        var = x.data.var(axis=lead)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu
        state.running_var = (1 - m) * state.running_var + m * var
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data
    n = int(np.prod([x.data.shape[ax] for ax in lead])) if lead else 1

    def bwd(g):
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        if training:
            m1 = gx.mean(axis=lead)
            m2 = (gx * xhat).mean(axis=lead)
            dx = inv * (gx - m1 - xhat * m2)
        else:
            dx = inv * gx
        return (dx, dgamma, dbeta)

    return custom_op((x, gamma, beta), out, bwd, op="batch_norm")


# -- loss --------------------------------------------------------------

def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy; labels is an int vector of class ids."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError("logits must be B×C")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = logits.data.shape[0]
    nll = -np.log(probs[np.arange(n), labels] + 1e-300)
    loss = nll.mean()

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (g * d / n,)

    return custom_op((logits,), np.array(loss), bwd, op="softmax_cross_entropy")


# -- real FFT pair -----------------------------------------------------

def rfft(x, n=None, axis=-1):
    """Real-to-complex FFT returning (real, imag) tensors of n//2+1 bins."""
    x = _as_tensor(x)
    if n is None:
        n = x.data.shape[axis]
    X = np.fft.rfft(x.data, n=n, axis=axis)
    L = x.data.shape[axis]

    def take(g_complex):
        # adjoint of x -> rfft(x, n): embed bins at full length, inverse, trim
        shape = list(g_complex.shape)
        shape[axis] = n
        full = np.zeros(shape, dtype=complex)
        sl = [slice(None)] * g_complex.ndim
        sl[axis] = slice(0, g_complex.shape[axis])
        full[tuple(sl)] = g_complex
        gx = n * np.real(np.fft.ifft(full, axis=axis))
        if n >= L:
            trim = [slice(None)] * gx.ndim
            trim[axis] = slice(0, L)
            return np.ascontiguousarray(gx[tuple(trim)])
        pad = [(0, 0)] * gx.ndim
        pad[axis] = (0, L - n)
        return np.pad(gx, pad)

    re = custom_op((x,), X.real.copy(), lambda g: (take(g.astype(complex)),), op="rfft_re")
    im = custom_op((x,), X.imag.copy(), lambda g: (take(1j * g),), op="rfft_im")
    return re, im


def irfft(re, im, n, axis=-1):
    """Inverse of :func:`rfft`: complex pair -> length-n real signal."""
    re, im = _as_tensor(re), _as_tensor(im)
    X = re.data + 1j * im.data
    out = np.fft.irfft(X, n=n, axis=axis)
    nbins = re.data.shape[axis]

    def bwd(g):
        F = np.fft.fft(g, axis=axis)
        sl = [slice(None)] * F.ndim
        sl[axis] = slice(0, nbins)
        Fb = F[tuple(sl)]
        c = np.ones(nbins) * 2.0
        c[0] = 1.0
        if n % 2 == 0 and nbins == n // 2 + 1:
            c[-1] = 1.0
        shape = [1] * F.ndim
        shape[axis] = nbins
        c = c.reshape(shape)
        return (np.ascontiguousarray(c * Fb.real / n),
                np.ascontiguousarray(c * Fb.imag / n))

    return custom_op((re, im), out, bwd, op="irfft")
