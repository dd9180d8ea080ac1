"""Spiking and baseline activations.

The binary spike is non-differentiable, so training substitutes a
surrogate derivative (fast sigmoid or arctan) evaluated at the
preactivation, straight-through style. The continuous saturating
baselines (optionally nested in ReLU) use their true analytic
derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf as _erf

from . import autodiff as ad

KINDS = ("binary_spike", "sat_fast_sigmoid", "sat_arctan",
         "relu_fast_sigmoid", "relu_arctan", "gelu", "identity")
SURROGATES = ("fast_sigmoid", "arctan")


@dataclass(frozen=True)
class ActivationSpec:
    kind: str
    surrogate: str = "arctan"
    theta: float = 0.0
    alpha: float = 25.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == "binary_spike" and self.surrogate not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.surrogate!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def binary_spike_forward(y, theta=0.0):
    """1 iff y > theta (strict), else 0."""
    return (np.asarray(y, dtype=np.float64) > theta).astype(np.float64)


def surrogate_backward(x, spec: ActivationSpec):
    """Surrogate derivative at preactivation x, multiplied into upstream grads."""
    x = np.asarray(x, dtype=np.float64)
    if spec.surrogate == "fast_sigmoid":
        return 1.0 / (spec.alpha * np.abs(x) + 1.0) ** 2
    return 1.0 / (1.0 + (np.pi * x) ** 2)


def saturating_forward(x, spec: ActivationSpec):
    """Continuous saturating baselines; relu_* kinds clamp negatives to 0."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind in ("sat_fast_sigmoid", "relu_fast_sigmoid"):
        out = x / (1.0 + np.abs(x) * spec.alpha)
    elif spec.kind in ("sat_arctan", "relu_arctan"):
        out = np.arctan(np.pi * x) / np.pi
    else:
        raise ValueError(f"{spec.kind!r} is not a saturating baseline")
    if spec.kind.startswith("relu_"):
        out = np.maximum(out, 0.0)
    return out


def saturating_grad(x, spec: ActivationSpec):
    """True analytic derivative of :func:`saturating_forward`."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind in ("sat_fast_sigmoid", "relu_fast_sigmoid"):
        g = 1.0 / (spec.alpha * np.abs(x) + 1.0) ** 2
    else:
        g = 1.0 / (1.0 + (np.pi * x) ** 2)
    if spec.kind.startswith("relu_"):
        # sign of the saturating value equals sign of x; clamp kills x<0
        g = g * (x > 0)
    return g


def gelu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    return x * 0.5 * (1.0 + _erf(x / math.sqrt(2.0)))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    phi = np.exp(-0.5 * x**2) / math.sqrt(2.0 * math.pi)
    return 0.5 * (1.0 + _erf(x / math.sqrt(2.0))) + x * phi


def apply_activation(t, spec: ActivationSpec):
    """Tape-level activation: forward per spec, backward per spec."""
    if spec.kind == "identity":
        return t
    x = t.data
    if spec.kind == "binary_spike":
        out = binary_spike_forward(x, spec.theta)
        sg = surrogate_backward(x, spec)
        return ad.custom_op((t,), out, lambda g: (g * sg,), op="binary_spike")
    if spec.kind == "gelu":
        return ad.custom_op((t,), gelu_forward(x),
                            lambda g: (g * gelu_grad(x),), op="gelu")
    out = saturating_forward(x, spec)
    dg = saturating_grad(x, spec)
    return ad.custom_op((t,), out, lambda g: (g * dg,), op=spec.kind)
