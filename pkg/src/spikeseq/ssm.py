"""Diagonal state-space channels.

Each channel is single-input single-output with an even state size d.
Only d/2 complex modes are stored; the other half are their conjugates,
so every real output is obtained as twice the real part of the stored
half. Continuous-time parameters are discretized per forward pass with
the bilinear transform, and execution can run either as an FFT
convolution with the materialized kernel or as an O(1)-memory scan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft

from . import autodiff as ad


class InvalidDimensionError(ValueError):
    pass


@dataclass
class SSMChannelParams:
    """Continuous-time parameters of one channel, reparameterized form.

    log_neg_real/imag hold the d/2 stored eigenvalues as
    A_n = -exp(log_neg_real[n]) + 1j*imag[n]; log_delta keeps the step
    size positive under unconstrained training.
    """

    log_neg_real: np.ndarray
    imag: np.ndarray
    B: np.ndarray            # complex, d/2
    C: np.ndarray            # complex, d/2
    D: float
    log_delta: float

    def __post_init__(self):
        self.log_neg_real = np.asarray(self.log_neg_real, dtype=np.float64)
        self.imag = np.asarray(self.imag, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.complex128)
        self.C = np.asarray(self.C, dtype=np.complex128)
        m = self.log_neg_real.shape[0]
        if m < 1 or self.imag.shape[0] != m or self.B.shape[0] != m or self.C.shape[0] != m:
            raise InvalidDimensionError("mode vectors must share length d/2 >= 1")

    @property
    def state_dim(self):
        return 2 * self.log_neg_real.shape[0]

    @property
    def A(self):
        """Reconstructed stored eigenvalues (strictly stable real part)."""
        return -np.exp(self.log_neg_real) + 1j * self.imag

    @property
    def delta(self):
        return float(np.exp(self.log_delta))


@dataclass
class DiscretizedKernel:
    a_bar: np.ndarray
    b_bar: np.ndarray
    kernel: np.ndarray | None = None
    length: int = 0


def _check_even(d):
    if d < 2 or d % 2 != 0:
        raise InvalidDimensionError(f"state size must be even and >= 2, got {d}")


def init_delta(delta_min, delta_max, rng):
    """Sample log(delta) with delta log-uniform on [delta_min, delta_max]."""
    if not (0 < delta_min < delta_max):
        raise ValueError(f"need 0 < delta_min < delta_max, got ({delta_min}, {delta_max})")
    lo, hi = np.log(delta_min), np.log(delta_max)
    return float(rng.uniform(lo, hi))


def _common_init(d, rng, delta_min, delta_max):
    m = d // 2
    # complex normal C with variance 1/2 per component
    C = rng.normal(0.0, np.sqrt(0.5), m) + 1j * rng.normal(0.0, np.sqrt(0.5), m)
    return dict(
        B=np.ones(m, dtype=np.complex128),
        C=C,
        D=1.0,
        log_delta=init_delta(delta_min, delta_max, rng),
    )


def init_s4d_lin(d, channel_index=0, rng_seed=0, delta_min=0.001, delta_max=0.1):
    """Linearly spaced imaginary parts: A_n = -1/2 + j*pi*n."""
    _check_even(d)
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, channel_index]))
    n = np.arange(d // 2)
    return SSMChannelParams(
        log_neg_real=np.log(0.5 * np.ones(d // 2)),
        imag=np.pi * n.astype(np.float64),
        **_common_init(d, rng, delta_min, delta_max),
    )


def init_s4d_inv(d, channel_index=0, rng_seed=0, delta_min=0.001, delta_max=0.1):
    """Inverse-law imaginary parts: A_n = -1/2 + j*(d/pi)*(d/(2n+1) - 1)."""
    _check_even(d)
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, channel_index]))
    n = np.arange(d // 2)
    return SSMChannelParams(
        log_neg_real=np.log(0.5 * np.ones(d // 2)),
        imag=(d / np.pi) * (d / (2.0 * n + 1.0) - 1.0),
        **_common_init(d, rng, delta_min, delta_max),
    )


def discretize_bilinear(params: SSMChannelParams) -> DiscretizedKernel:
    """Bilinear transform of the stored modes; diagonal, so elementwise."""
    a = params.A
    delta = params.delta
    den = 1.0 - 0.5 * delta * a
    a_bar = (1.0 + 0.5 * delta * a) / den
    b_bar = delta * params.B / den
    return DiscretizedKernel(a_bar=a_bar, b_bar=b_bar)


def compute_kernel(a_bar, b_bar, C, L):
    """Length-L real kernel K[p] = 2*Re(sum_n C_n a_bar_n^p b_bar_n).

    Powers come from a cumulative elementwise scan, O(L*d/2).
    """
    if L < 1:
        raise ValueError("kernel length must be >= 1")
    a_bar = np.asarray(a_bar, dtype=np.complex128)
    w = np.asarray(C, dtype=np.complex128) * np.asarray(b_bar, dtype=np.complex128)
    powers = np.ones((L, a_bar.shape[0]), dtype=np.complex128)
    if L > 1:
        powers[1:] = np.cumprod(np.broadcast_to(a_bar, (L - 1, a_bar.shape[0])), axis=0)
    return 2.0 * np.real(powers @ w)


def conv_naive(kernel, signal):
    """Direct O(L^2) causal convolution; the oracle for the FFT path."""
    kernel = np.asarray(kernel, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    if kernel.shape != signal.shape:
        raise ValueError(f"length mismatch: {kernel.shape} vs {signal.shape}")
    L = kernel.shape[0]
    out = np.zeros(L)
    for t in range(L):
        out[t] = kernel[: t + 1] @ signal[t::-1]
    return out


def _conv_fft_len(L):
    """Transform length for linear (non-circular) causal convolution.

    Any n >= 2L-1 avoids wrap-around; rounding up to a fast composite
    length keeps the transforms off the slow Bluestein path.
    """
    return 1 if L == 1 else scipy.fft.next_fast_len(2 * L - 1, real=True)


def conv_fft(kernel, signal):
    """Causal convolution via zero-padded FFT (linear, not circular)."""
    kernel = np.asarray(kernel, dtype=np.float64)
    signal = np.asarray(signal, dtype=np.float64)
    if kernel.shape != signal.shape:
        raise ValueError(f"length mismatch: {kernel.shape} vs {signal.shape}")
    L = kernel.shape[0]
    n = _conv_fft_len(L)
    return np.fft.irfft(np.fft.rfft(kernel, n) * np.fft.rfft(signal, n), n)[:L]


def scan_iterative(params: SSMChannelParams, signal):
    """Stateful recurrence u <- a_bar*u + b_bar*i, y = 2Re(C u) + D i.

    Returns (outputs, final_state); O(1) memory per step.
    """
    disc = discretize_bilinear(params)
    signal = np.asarray(signal, dtype=np.float64)
    L = signal.shape[0]
    u = np.zeros_like(disc.a_bar)
    y = np.zeros(L)
    for t in range(L):
        u = disc.a_bar * u + disc.b_bar * signal[t]
        y[t] = 2.0 * np.real(params.C @ u) + params.D * signal[t]
    return y, u


# -- vectorized bank helpers (H channels at once) ----------------------

def kernel_bank(log_neg_real, imag, B_re, B_im, C_re, C_im, log_delta, L):
    """Kernels for a bank of channels; all mode arrays are (H, m).

    Returns (kernels (H, L), cache) where cache carries the
    intermediates the analytic backward needs.
    """
    A = -np.exp(log_neg_real) + 1j * imag
    delta = np.exp(log_delta)[:, None]
    Bc = B_re + 1j * B_im
    Cc = C_re + 1j * C_im
    den = 1.0 - 0.5 * delta * A
    a_bar = (1.0 + 0.5 * delta * A) / den
    b_bar = delta * Bc / den
    w = Cc * b_bar
    H, m = A.shape
    powers = np.ones((H, L, m), dtype=np.complex128)
    if L > 1:
        np.cumprod(np.broadcast_to(a_bar[:, None, :], (H, L - 1, m)), axis=1,
                   out=powers[:, 1:, :])
    K = 2.0 * np.real(np.einsum("hlm,hm->hl", powers, w))
    cache = dict(A=A, delta=delta, Bc=Bc, Cc=Cc, den=den, a_bar=a_bar,
                 b_bar=b_bar, w=w, powers=powers)
    return K, cache


def kernel_bank_backward(g, cache):
    """Analytic gradients of the kernel scan wrt all bank parameters.

    ``g`` is dLoss/dK of shape (H, L). Complex gradients use the
    convention grad_z = d/dz_re + j*d/dz_im, so holomorphic links
    contribute conj(dout/din) * grad_out.
    """
    A, delta = cache["A"], cache["delta"]
    Bc, Cc, den = cache["Bc"], cache["Cc"], cache["den"]
    a_bar, b_bar, w, powers = cache["a_bar"], cache["b_bar"], cache["w"], cache["powers"]
    H, L, m = powers.shape

    g_w = 2.0 * np.einsum("hl,hlm->hm", g, np.conj(powers))
    if L > 1:
        p = np.arange(1, L, dtype=np.float64)
        T = np.einsum("hl,l,hlm->hm", g[:, 1:], p, powers[:, :-1, :])
    else:
        T = np.zeros((H, m), dtype=np.complex128)
    g_a = 2.0 * np.conj(w * T)

    g_C = np.conj(b_bar) * g_w
    g_b = np.conj(Cc) * g_w

    # a_bar = (1+x)/(1-x), b_bar = delta*B/(1-x) with x = delta/2 * A
    g_x = np.conj(2.0 / den**2) * g_a + np.conj(delta * Bc / den**2) * g_b
    g_B = np.conj(delta / den) * g_b
    g_A = 0.5 * delta * g_x
    g_delta = (np.real(np.conj(g_x) * 0.5 * A)
               + np.real(np.conj(g_b) * Bc / den)).sum(axis=1, keepdims=True)

    # dA_re/dlog_neg_real = -exp(log_neg_real) = Re(A)
    g_log_neg_real = np.real(g_A) * np.real(A)
    g_imag = np.imag(g_A)
    g_log_delta = (g_delta * delta)[:, 0]
    return (g_log_neg_real, g_imag,
            np.real(g_B), np.imag(g_B),
            np.real(g_C), np.imag(g_C),
            g_log_delta)


def causal_conv_bank(kernels, x):
    """Convolve each feature column with its channel kernel.

    kernels: (H, L); x: (B, L, H). Returns (B, L, H).
    """
    H, L = kernels.shape
    if x.shape[1] != L or x.shape[2] != H:
        raise ValueError(f"shape mismatch: kernels {kernels.shape}, input {x.shape}")
    n = _conv_fft_len(L)
    Khat = np.fft.rfft(kernels.T, n, axis=0)          # (nf, H)
    Xhat = np.fft.rfft(x, n, axis=1)                  # (B, nf, H)
    return np.fft.irfft(Xhat * Khat[None], n, axis=1)[:, :L, :]


def causal_conv_bank_backward(g, kernels, x):
    """Adjoint of :func:`causal_conv_bank` (causal correlations via FFT)."""
    H, L = kernels.shape
    n = _conv_fft_len(L)
    Ghat = np.fft.rfft(g, n, axis=1)
    Khat = np.fft.rfft(kernels.T, n, axis=0)
    Xhat = np.fft.rfft(x, n, axis=1)
    gx = np.fft.irfft(Ghat * np.conj(Khat)[None], n, axis=1)[:, :L, :]
    gk = np.fft.irfft((Ghat * np.conj(Xhat)).sum(axis=0), n, axis=0)[:L, :].T
    return gk, gx


# -- tape ops ----------------------------------------------------------

def kernel_bank_op(log_neg_real, imag, B_re, B_im, C_re, C_im, log_delta, L):
    """Differentiable bank kernel generation (analytic power-scan backward)."""
    ins = (log_neg_real, imag, B_re, B_im, C_re, C_im, log_delta)
    K, cache = kernel_bank(*(t.data for t in ins), L)
    return ad.custom_op(ins, K, lambda g: kernel_bank_backward(g, cache), op="ssm_kernel")


def causal_conv_op(kernels, x):
    """Differentiable per-channel causal convolution, (H,L) x (B,L,H)."""
    out = causal_conv_bank(kernels.data, x.data)

    def bwd(g):
        gk, gx = causal_conv_bank_backward(g, kernels.data, x.data)
        return (gk, gx)

    return ad.custom_op((kernels, x), out, bwd, op="causal_conv")


def ssm_layer_forward(banks, x, bidirectional=False):
    """Numpy reference of a full SSM layer over a batch tensor.

    ``banks`` is a list of H SSMChannelParams (forward direction) or a
    pair of such lists when bidirectional; outputs are summed across
    directions before any activation.
    """
    fwd = banks[0] if bidirectional else banks
    if x.ndim != 3 or x.shape[2] != len(fwd):
        raise ValueError(f"input must be B×L×H with H={len(fwd)}, got {x.shape}")
    B, L, H = x.shape

    def run(bank, xs):
        out = np.zeros_like(xs)
        for h, ch in enumerate(bank):
            disc = discretize_bilinear(ch)
            k = compute_kernel(disc.a_bar, disc.b_bar, ch.C, L)
            for b in range(B):
                out[b, :, h] = conv_fft(k, xs[b, :, h]) + ch.D * xs[b, :, h]
        return out

    y = run(fwd, x)
    if bidirectional:
        y = y + run(banks[1], x[:, ::-1, :])[:, ::-1, :]
    return y
