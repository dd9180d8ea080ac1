"""Leaky integrate-and-fire reference neuron.

With the reset connection removed the neuron is linear time-invariant
and equals a causal convolution with kernel beta^t * (1 - beta); the
reset (threshold subtraction conditioned on the previous spike) breaks
that equivalence and forces iterative evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class UnsupportedModeError(ValueError):
    pass


@dataclass(frozen=True)
class LIFParams:
    beta: float
    theta: float = 1.0
    reset_mode: str = "subtract"   # "subtract" | "none"
    R: float = 1.0                 # input resistance, fixed

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must be in (0,1), got {self.beta}")
        if self.reset_mode not in ("subtract", "none"):
            raise ValueError(f"unknown reset mode {self.reset_mode!r}")


def lif_step(params: LIFParams, u_prev, s_prev, i_t):
    """One membrane update: reset on last spike, leak, integrate, fire."""
    u = u_prev
    if params.reset_mode == "subtract" and s_prev:
        u = u - params.theta
    u_t = params.beta * u + (1.0 - params.beta) * i_t
    s_t = 1 if u_t > params.theta else 0
    return u_t, s_t


def lif_run(params: LIFParams, inputs):
    """Iterate lif_step over a 1-D input current; returns (u trace, spikes)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    u, s = 0.0, 0
    us = np.zeros(inputs.shape[0])
    ss = np.zeros(inputs.shape[0], dtype=np.int64)
    for t, i_t in enumerate(inputs):
        u, s = lif_step(params, u, s, i_t)
        us[t] = u
        ss[t] = s
    return us, ss


def lif_kernel(params: LIFParams, L):
    """Global kernel kappa[p] = beta^p * (1 - beta) of the reset-free neuron."""
    if params.reset_mode != "none":
        raise UnsupportedModeError("reset breaks time invariance; use reset_mode='none'")
    p = np.arange(L)
    return params.beta ** p * (1.0 - params.beta)
