"""Gated Spiking Unit, GLU, ternarization, and operation accounting.

The GSU mixes features through two parallel streams that need no
multiply-accumulate work: ternarized activations select signed rows of
the full-precision weights, and full-precision activations are combined
through ternarized weights. The only scalar multiplications left are
the k Hadamard products joining the streams, which the OpCounter
harness demonstrates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OpCounter:
    """Scalar multiply/add tally for one instrumented forward."""

    multiplies: int = 0
    adds: int = 0
    label: str = ""


@dataclass
class GSULayerParams:
    W: np.ndarray                   # d×k, shared between both streams
    b: np.ndarray                   # k
    c: np.ndarray                   # k
    alpha_ter: float = 0.15

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if not 0.0 < self.alpha_ter < 1.0:
            raise ValueError("alpha_ter must lie in (0, 1)")
        d, k = self.W.shape
        if self.b.shape != (k,) or self.c.shape != (k,):
            raise ValueError("bias shapes must match the output width")


@dataclass
class GLULayerParams:
    W: np.ndarray
    V: np.ndarray
    b: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if self.V.shape != self.W.shape:
            raise ValueError("W and V must share a shape")


def ternarize(x, alpha_ter=0.15):
    """Map to {-1, 0, 1} with threshold alpha_ter * max|x| over the tensor.

    An all-zero input has threshold 0 and ternarizes to all zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot ternarize an empty tensor")
    delta = alpha_ter * np.abs(x).max()
    if delta == 0.0:
        return np.zeros_like(x)
    return np.where(x >= delta, 1.0, np.where(x <= -delta, -1.0, 0.0))


def gsu_forward(params: GSULayerParams, x, counter: OpCounter | None = None):
    """(Ter(x)·W + b) ⊙ (x·Ter(W) + c) by signed accumulation.

    Stream one accumulates W rows picked by the nonzero ternary
    activations; stream two accumulates x entries picked by the nonzero
    ternary weights. No multiplications besides the final Hadamard.
    """
    x = np.asarray(x, dtype=np.float64)
    d, k = params.W.shape
    if x.shape != (d,):
        raise ValueError(f"expected input of shape ({d},), got {x.shape}")
    tx = ternarize(x, params.alpha_ter)
    tw = ternarize(params.W, params.alpha_ter)

    stream1 = params.b.copy()
    for i in np.flatnonzero(tx):
        if tx[i] > 0:
            stream1 += params.W[i]
        else:
            stream1 -= params.W[i]
        if counter is not None:
            counter.adds += k
    stream2 = params.c.copy()
    rows, cols = np.nonzero(tw)
    for i, j in zip(rows, cols):
        if x[i] != 0.0:
            stream2[j] += x[i] if tw[i, j] > 0 else -x[i]
            if counter is not None:
                counter.adds += 1
    if counter is not None:
        counter.adds += 2 * k          # bias initialization of both streams
        counter.multiplies += k        # Hadamard join
        counter.label = counter.label or "gsu"
    return stream1 * stream2


def glu_forward(params: GLULayerParams, x, counter: OpCounter | None = None):
    """(x·W + b) ⊙ sigmoid(x·V + c) with dense projections."""
    x = np.asarray(x, dtype=np.float64)
    d, k = params.W.shape
    if x.shape != (d,):
        raise ValueError(f"expected input of shape ({d},), got {x.shape}")
    lin = x @ params.W + params.b
    gate = 1.0 / (1.0 + np.exp(-(x @ params.V + params.c)))
    if counter is not None:
        counter.multiplies += 2 * d * k + k
        counter.adds += 2 * d * k + 2 * k
        counter.label = counter.label or "glu"
    return lin * gate


def gsu_backward(params: GSULayerParams, x, upstream):
    """Straight-through gradients: Ter acts as identity in the backward.

    Returns (grad_x, grad_W, grad_b, grad_c) against the cached forward
    stream values.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    tx = ternarize(x, params.alpha_ter)
    tw = ternarize(params.W, params.alpha_ter)
    stream1 = tx @ params.W + params.b
    stream2 = x @ tw + params.c

    g1 = upstream * stream2            # into stream one
    g2 = upstream * stream1            # into stream two
    grad_b = g1
    grad_c = g2
    grad_x = params.W @ g1 + tw @ g2
    grad_W = np.outer(tx, g1) + np.outer(x, g2)
    return grad_x, grad_W, grad_b, grad_c


def audit_ops(layer_forward, label=""):
    """Run an instrumented forward closure and return its OpCounter."""
    counter = OpCounter(label=label)
    layer_forward(counter)
    return counter
