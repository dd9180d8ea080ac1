"""Trainable sequence classifiers built from SSM channel banks.

A model is: scalar-pixel encoder (1 -> H affine per step), a stack of
layer blocks (norm / SSM bank / activation / GLU-or-GSU mixer / dropout
/ optional residual), mean pooling over time (rate decoding), and an
affine head. Forward runs in convolution mode on the autodiff tape; an
equivalent O(H*d)-state iterative mode is provided for unidirectional
inference.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import ssm as ssm_mod
from .activations import ActivationSpec, apply_activation
from .autodiff import BatchNormState, Tensor
from .gsu import ternarize as gsu_ternarize

CHECKPOINT_MAGIC = b"SPKSEQ01"


class UnsupportedModeError(ValueError):
    pass


class ChecksumError(ValueError):
    pass


@dataclass(frozen=True)
class LayerBlockConfig:
    features: int
    state_dim: int
    activation: ActivationSpec
    mixer: str = "glu"             # "glu" | "gsu"
    norm: str = "layer"            # "batch" | "layer"
    pre_norm: bool = False
    dropout: float = 0.0
    bidirectional: bool = False
    residual: str = "after_mixing"  # "after_mixing" | "none"
    alpha_ter: float = 0.15

    def __post_init__(self):
        if self.mixer not in ("glu", "gsu"):
            raise ValueError(f"unknown mixer {self.mixer!r}")
        if self.norm not in ("batch", "layer"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.residual not in ("after_mixing", "none"):
            raise ValueError(f"unknown residual mode {self.residual!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.activation.kind == "binary_spike" and self.residual == "after_mixing":
            pass  # spiking blocks keep residuals after mixing by construction


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    block: LayerBlockConfig
    n_classes: int
    init: str = "s4d_inv"          # "s4d_inv" | "s4d_lin"
    delta_min: float = 0.001
    delta_max: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("need at least one layer")
        if self.init not in ("s4d_inv", "s4d_lin"):
            raise ValueError(f"unknown init {self.init!r}")


class Param:
    """Named trainable tensor with an optimizer group tag."""

    def __init__(self, name, data, group="regular"):
        self.name = name
        arr = np.ascontiguousarray(data, dtype=np.float64).copy()
        self.tensor = Tensor(arr, requires_grad=True)
        self.group = group

    @property
    def data(self):
        return self.tensor.data


def _flip_time(t):
    out = np.ascontiguousarray(t.data[:, ::-1, :])
    return ad.custom_op((t,), out,
                        lambda g: (np.ascontiguousarray(g[:, ::-1, :]),), op="flip_time")


def _ternarize_bank(x, alpha):
    """Per-position ternary pattern: threshold over each feature vector."""
    delta = alpha * np.abs(x).max(axis=-1, keepdims=True)
    out = np.where(x >= delta, 1.0, np.where(x <= -delta, -1.0, 0.0))
    return np.where(delta > 0, out, 0.0)


def gsu_mix_op(x, W, b, c, alpha):
    """Tape-level GSU over B×L×H with straight-through ternary backward."""
    xd = x.data
    tx = _ternarize_bank(xd, alpha)
    tw = gsu_ternarize(W.data, alpha)
    s1 = tx @ W.data + b.data
    s2 = xd @ tw + c.data
    out = s1 * s2

    def bwd(g):
        g1 = g * s2
        g2 = g * s1
        gx = g1 @ W.data.T + g2 @ tw.T
        flat = xd.reshape(-1, xd.shape[-1])
        g1f = g1.reshape(-1, g1.shape[-1])
        g2f = g2.reshape(-1, g2.shape[-1])
        gW = tx.reshape(-1, tx.shape[-1]).T @ g1f + flat.T @ g2f
        lead = tuple(range(g.ndim - 1))
        return (gx, gW, g1.sum(axis=lead), g2.sum(axis=lead))

    return ad.custom_op((x, W, b, c), out, bwd, op="gsu_mix")


class SSMBank:
    """H independent channels (one direction) stored as stacked arrays."""

    def __init__(self, prefix, H, d, init, delta_min, delta_max, seed):
        m = d // 2
        lnr = np.empty((H, m))
        imag = np.empty((H, m))
        B = np.empty((H, m), dtype=np.complex128)
        C = np.empty((H, m), dtype=np.complex128)
        ld = np.empty(H)
        init_fn = ssm_mod.init_s4d_inv if init == "s4d_inv" else ssm_mod.init_s4d_lin
        for h in range(H):
            ch = init_fn(d, channel_index=h, rng_seed=seed,
                         delta_min=delta_min, delta_max=delta_max)
            lnr[h], imag[h], B[h], C[h], ld[h] = (
                ch.log_neg_real, ch.imag, ch.B, ch.C, ch.log_delta)
        self.log_neg_real = Param(f"{prefix}.log_neg_real", lnr, "ssm")
        self.imag = Param(f"{prefix}.imag", imag, "ssm")
        self.B_re = Param(f"{prefix}.B_re", B.real, "ssm")
        self.B_im = Param(f"{prefix}.B_im", B.imag, "ssm")
        self.C_re = Param(f"{prefix}.C_re", C.real, "ssm")
        self.C_im = Param(f"{prefix}.C_im", C.imag, "ssm")
        self.log_delta = Param(f"{prefix}.log_delta", ld, "ssm")
        self.D = Param(f"{prefix}.D", np.ones(H), "regular")

    def params(self):
        return [self.log_neg_real, self.imag, self.B_re, self.B_im,
                self.C_re, self.C_im, self.log_delta, self.D]

    def kernels(self, L):
        return ssm_mod.kernel_bank_op(
            self.log_neg_real.tensor, self.imag.tensor,
            self.B_re.tensor, self.B_im.tensor,
            self.C_re.tensor, self.C_im.tensor,
            self.log_delta.tensor, L)

    def discrete(self):
        """Numpy (a_bar (H,m), b_bar (H,m), C (H,m), D (H,)) for the scan path."""
        A = -np.exp(self.log_neg_real.data) + 1j * self.imag.data
        delta = np.exp(self.log_delta.data)[:, None]
        den = 1.0 - 0.5 * delta * A
        a_bar = (1.0 + 0.5 * delta * A) / den
        b_bar = delta * (self.B_re.data + 1j * self.B_im.data) / den
        C = self.C_re.data + 1j * self.C_im.data
        return a_bar, b_bar, C, self.D.data


class LayerBlock:
    def __init__(self, idx, cfg: LayerBlockConfig, init, delta_min, delta_max, seed):
        H = cfg.features
        self.cfg = cfg
        p = f"layers.{idx}"
        self.fwd = SSMBank(f"{p}.fwd", H, cfg.state_dim, init, delta_min, delta_max,
                           seed + 1000 * idx)
        self.bwd = None
        if cfg.bidirectional:
            self.bwd = SSMBank(f"{p}.bwd", H, cfg.state_dim, init, delta_min, delta_max,
                               seed + 1000 * idx + 500)
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx, 7]))
        scale = 1.0 / np.sqrt(H)
        self.mix_W = Param(f"{p}.mix_W", rng.normal(0, scale, (H, H)))
        self.mix_b = Param(f"{p}.mix_b", np.zeros(H))
        self.mix_c = Param(f"{p}.mix_c", np.zeros(H))
        self.mix_V = None
        if cfg.mixer == "glu":
            self.mix_V = Param(f"{p}.mix_V", rng.normal(0, scale, (H, H)))
        self.norm_gamma = Param(f"{p}.norm_gamma", np.ones(H))
        self.norm_beta = Param(f"{p}.norm_beta", np.zeros(H))
        self.bn_state = BatchNormState(H) if cfg.norm == "batch" else None
        self.gsu_ln_gamma = None
        self.gsu_ln_beta = None
        if cfg.mixer == "gsu":
            self.gsu_ln_gamma = Param(f"{p}.gsu_ln_gamma", np.ones(H))
            self.gsu_ln_beta = Param(f"{p}.gsu_ln_beta", np.zeros(H))

    def params(self):
        out = self.fwd.params()
        if self.bwd is not None:
            out += self.bwd.params()
        out += [self.mix_W, self.mix_b, self.mix_c]
        if self.mix_V is not None:
            out.append(self.mix_V)
        out += [self.norm_gamma, self.norm_beta]
        if self.gsu_ln_gamma is not None:
            out += [self.gsu_ln_gamma, self.gsu_ln_beta]
        return out

    def _norm(self, t, training):
        if self.cfg.norm == "layer":
            return ad.layer_norm(t, self.norm_gamma.tensor, self.norm_beta.tensor)
        return ad.batch_norm(t, self.norm_gamma.tensor, self.norm_beta.tensor,
                             self.bn_state, training)

    def _mix(self, t):
        H = self.cfg.features
        if self.cfg.mixer == "gsu":
            mixed = gsu_mix_op(t, self.mix_W.tensor, self.mix_b.tensor,
                               self.mix_c.tensor, self.cfg.alpha_ter)
            mixed = ad.layer_norm(mixed, self.gsu_ln_gamma.tensor, self.gsu_ln_beta.tensor)
            return apply_activation(mixed, ActivationSpec("gelu"))
        shp = t.shape
        flat = ad.reshape(t, (-1, H))
        lin = ad.matmul(flat, self.mix_W.tensor) + self.mix_b.tensor
        gate = ad.logistic(ad.matmul(flat, self.mix_V.tensor) + self.mix_c.tensor)
        return ad.reshape(lin * gate, shp)

    def forward(self, x, training, rng, collect=None):
        cfg = self.cfg
        h = self._norm(x, training) if cfg.pre_norm else x
        k = self.fwd.kernels(x.shape[1])
        y = ssm_mod.causal_conv_op(k, h) + h * self.fwd.D.tensor
        if self.bwd is not None:
            hr = _flip_time(h)
            kb = self.bwd.kernels(x.shape[1])
            yb = ssm_mod.causal_conv_op(kb, hr) + hr * self.bwd.D.tensor
            y = y + _flip_time(yb)
        a = apply_activation(y, cfg.activation)
        if collect is not None:
            if cfg.activation.kind == "binary_spike" and "spike_rates" in collect:
                collect["spike_rates"].append(float(a.data.mean()))
            if "mixer_inputs" in collect:
                collect["mixer_inputs"].append(a.data)
        m = self._mix(a)
        m = ad.dropout(m, cfg.dropout, training, rng)
        if not cfg.pre_norm:
            m = self._norm(m, training)
        if cfg.residual == "after_mixing":
            m = m + x
        return m


class Model:
    def __init__(self, config: ModelConfig):
        self.config = config
        H = config.block.features
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 99]))
        self.enc_W = Param("encoder.W", rng.normal(0, 1.0, (1, H)))
        self.enc_b = Param("encoder.b", np.zeros(H))
        self.blocks = [
            LayerBlock(i, config.block, config.init, config.delta_min,
                       config.delta_max, config.seed)
            for i in range(config.n_layers)
        ]
        self.head_W = Param("head.W", rng.normal(0, 1.0 / np.sqrt(H), (H, config.n_classes)))
        self.head_b = Param("head.b", np.zeros(config.n_classes))

    # -- parameters ----------------------------------------------------
    def params(self):
        out = [self.enc_W, self.enc_b]
        for blk in self.blocks:
            out += blk.params()
        out += [self.head_W, self.head_b]
        return out

    def zero_grad(self):
        for p in self.params():
            p.tensor.grad = None

    def count_parameters(self):
        """Trainable scalars; conjugate modes stored once and counted once."""
        return sum(p.data.size for p in self.params())

    # -- forward -------------------------------------------------------
    def features(self, pixels, training=False, rng=None, collect=None):
        """pixels (B, L) -> pre-pooling feature Tensor (B, L, H)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ValueError("expected a B×L pixel batch")
        if rng is None:
            rng = np.random.default_rng(0)
        B, L = pixels.shape
        H = self.config.block.features
        x = Tensor(pixels)
        flat = ad.reshape(x, (B * L, 1))
        h = ad.reshape(ad.matmul(flat, self.enc_W.tensor) + self.enc_b.tensor, (B, L, H))
        for blk in self.blocks:
            h = blk.forward(h, training, rng, collect)
        return h

    def forward(self, pixels, training=False, rng=None, collect=None):
        """pixels (B, L) -> logits Tensor (B, n_classes)."""
        h = self.features(pixels, training, rng, collect)
        pooled = ad.tmean(h, axis=1)
        return ad.matmul(pooled, self.head_W.tensor) + self.head_b.tensor

    def forward_iterative(self, sequence):
        """Stream one sequence through the scan path; unidirectional only.

        Constant O(H*d) state per layer regardless of length; matches
        convolution-mode logits to fp tolerance.
        """
        if self.config.block.bidirectional:
            raise UnsupportedModeError("iterative inference requires a unidirectional model")
        from .activations import (binary_spike_forward, gelu_forward,
                                  saturating_forward)
        cfg = self.config.block
        seq = np.asarray(sequence, dtype=np.float64)
        L = seq.shape[0]
        H = cfg.features
        banks = [blk.fwd.discrete() for blk in self.blocks]
        states = [np.zeros_like(b[0]) for b in banks]
        # bookkeeping: the whole recurrent state, fixed by the config and
        # reused every step regardless of sequence length
        self.last_scan_state_elems = sum(s.size for s in states)
        pooled = np.zeros(H)
        eps = 1e-5
        for t in range(L):
            feat = seq[t] * self.enc_W.data[0] + self.enc_b.data
            for li, blk in enumerate(self.blocks):
                a_bar, b_bar, C, D = banks[li]
                x_in = feat
                if cfg.pre_norm:
                    feat = self._norm_step(blk, feat, eps)
                states[li] = a_bar * states[li] + b_bar * feat[:, None]
                y = 2.0 * np.real(np.einsum("hm,hm->h", C, states[li])) + D * feat
                if cfg.activation.kind == "binary_spike":
                    a = binary_spike_forward(y, cfg.activation.theta)
                elif cfg.activation.kind == "gelu":
                    a = gelu_forward(y)
                elif cfg.activation.kind == "identity":
                    a = y
                else:
                    a = saturating_forward(y, cfg.activation)
                if cfg.mixer == "gsu":
                    dmax = cfg.alpha_ter * np.abs(a).max()
                    tx = np.where(a >= dmax, 1.0, np.where(a <= -dmax, -1.0, 0.0)) \
                        if dmax > 0 else np.zeros_like(a)
                    tw = gsu_ternarize(blk.mix_W.data, cfg.alpha_ter)
                    m = (tx @ blk.mix_W.data + blk.mix_b.data) * (a @ tw + blk.mix_c.data)
                    mu = m.mean()
                    m = blk.gsu_ln_gamma.data * (m - mu) / np.sqrt(m.var() + eps) \
                        + blk.gsu_ln_beta.data
                    m = gelu_forward(m)
                else:
                    lin = a @ blk.mix_W.data + blk.mix_b.data
                    gate = 1.0 / (1.0 + np.exp(-(a @ blk.mix_V.data + blk.mix_c.data)))
                    m = lin * gate
                if not cfg.pre_norm:
                    m = self._norm_step(blk, m, eps)
                if cfg.residual == "after_mixing":
                    m = m + x_in
                feat = m
            pooled += feat
        pooled /= L
        return pooled @ self.head_W.data + self.head_b.data

    @staticmethod
    def _norm_step(blk, v, eps):
        if blk.cfg.norm == "layer":
            return blk.norm_gamma.data * (v - v.mean()) / np.sqrt(v.var() + eps) \
                + blk.norm_beta.data
        st = blk.bn_state
        return blk.norm_gamma.data * (v - st.running_mean) \
            / np.sqrt(st.running_var + st.eps) + blk.norm_beta.data

    # -- state io ------------------------------------------------------
    def state_arrays(self):
        out = {p.name: p.data for p in self.params()}
        for i, blk in enumerate(self.blocks):
            if blk.bn_state is not None:
                out[f"layers.{i}.bn_running_mean"] = blk.bn_state.running_mean
                out[f"layers.{i}.bn_running_var"] = blk.bn_state.running_var
        return out

    def load_state_arrays(self, arrays):
        by_name = {p.name: p for p in self.params()}
        for name, arr in arrays.items():
            if name in by_name:
                p = by_name[name]
                if p.data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {name}")
                p.tensor.data = arr.astype(np.float64).copy()
            elif name.endswith("bn_running_mean") or name.endswith("bn_running_var"):
                idx = int(name.split(".")[1])
                st = self.blocks[idx].bn_state
                if name.endswith("mean"):
                    st.running_mean = arr.copy()
                else:
                    st.running_var = arr.copy()
            else:
                raise KeyError(f"unknown tensor {name!r} in checkpoint")


# -- checkpoint container ---------------------------------------------

def config_digest(config_text):
    return hashlib.sha256(config_text.encode("utf-8")).digest()


def save_checkpoint(path, config_text, arrays):
    """Versioned binary container: magic, digest, config, tensor records."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(config_digest(config_text))
        cb = config_text.encode("utf-8")
        f.write(struct.pack("<I", len(cb)))
        f.write(cb)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            arr = np.asarray(arr, dtype=np.float64)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Returns (config_text, {name: array}); verifies magic and digest."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ChecksumError(f"bad checkpoint magic {magic!r}")
        digest = f.read(32)
        (clen,) = struct.unpack("<I", f.read(4))
        cb = f.read(clen)
        if hashlib.sha256(cb).digest() != digest:
            raise ChecksumError("config digest mismatch")
        config_text = cb.decode("utf-8")
        (n,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(n):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack("<" + "Q" * rank, f.read(8 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = f.read(8 * count)
            if len(payload) != 8 * count:
                raise ChecksumError(f"truncated payload for {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return config_text, arrays
