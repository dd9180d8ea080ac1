"""Training, evaluation, and iterative inference harness.

Optimization follows the usual S4-style recipe: decoupled-weight-decay
Adam with a cosine learning-rate schedule, and the SSM dynamics
parameters excluded from weight decay with their learning rate capped
at 1e-3.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import gsu as gsu_mod
from .activations import ActivationSpec
from .network import (LayerBlockConfig, Model, ModelConfig, load_checkpoint,
                      save_checkpoint)

DATA_ROOT_ENV = "SPIKESEQ_DATA_ROOT"
SSM_LR_CAP = 0.001


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str
    n_layers: int = 2
    features: int = 128
    state_dim: int = 2
    activation: str = "binary_spike"
    surrogate: str = "arctan"
    mixer: str = "glu"
    bidirectional: bool = False
    residual: str = "none"
    norm: str = "layer"
    pre_norm: bool = False
    init: str = "s4d_inv"
    dropout: float = 0.0
    lr: float = 0.01
    weight_decay: float = 0.05
    batch_size: int = 64
    epochs: int = 10
    delta_min: float = 0.001
    delta_max: float = 0.1
    seed: int = 0
    out_dir: str = "runs/default"
    data_root: str = ""
    synth_length: int = 1024
    synth_classes: int = 2
    synth_train: int = 2000
    synth_test: int = 500
    train_limit: int = 0           # 0 = full split

    def validate(self):
        if self.task not in ("sMNIST", "sCIFAR", "synth"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.lr < 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ConfigError("lr, batch_size, epochs must be non-negative/positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    def to_text(self):
        """Canonical key=value serialization (checkpoint config record)."""
        lines = [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
_BOOLS = {"bidirectional", "pre_norm"}
_INTS = {"n_layers", "features", "state_dim", "batch_size", "epochs", "seed",
         "synth_length", "synth_classes", "synth_train", "synth_test", "train_limit"}
_FLOATS = {"dropout", "lr", "weight_decay", "delta_min", "delta_max"}


def _coerce(key, value):
    if key in _BOOLS:
        v = value.strip().lower()
        if v in ("true", "1", "yes"):
            return True
        if v in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {value!r}")
    try:
        if key in _INTS:
            return int(value)
        if key in _FLOATS:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return value


def parse_config(path=None, overrides=None, text=None):
    """key=value config file plus flag overrides; unknown keys rejected."""
    pairs = {}
    if text is None:
        with open(path) as f:
            text = f.read()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        pairs[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        pairs[key] = _coerce(key, str(value))
    if "task" not in pairs:
        raise ConfigError("missing required key 'task'")
    return TrainConfig(**pairs).validate()


def model_config(cfg: TrainConfig) -> ModelConfig:
    spec = ActivationSpec(cfg.activation, surrogate=cfg.surrogate)
    block = LayerBlockConfig(
        features=cfg.features, state_dim=cfg.state_dim, activation=spec,
        mixer=cfg.mixer, norm=cfg.norm, pre_norm=cfg.pre_norm,
        dropout=cfg.dropout, bidirectional=cfg.bidirectional,
        residual=cfg.residual)
    return ModelConfig(n_layers=cfg.n_layers, block=block,
                       n_classes=10 if cfg.task in ("sMNIST", "sCIFAR") else cfg.synth_classes,
                       init=cfg.init, delta_min=cfg.delta_min,
                       delta_max=cfg.delta_max, seed=cfg.seed)


def _data_root(cfg: TrainConfig):
    return cfg.data_root or os.environ.get(DATA_ROOT_ENV, "")


def load_task_datasets(cfg: TrainConfig):
    """Returns (train, test) SequenceDatasets for the configured task."""
    if cfg.task == "synth":
        train = data_mod.synth_first_token_recall(
            cfg.synth_length, cfg.synth_classes, cfg.synth_train, cfg.seed, "train")
        test = data_mod.synth_first_token_recall(
            cfg.synth_length, cfg.synth_classes, cfg.synth_test, cfg.seed + 1, "test")
    elif cfg.task == "sMNIST":
        root = _data_root(cfg)
        paths = [os.path.join(root, n) for n in
                 ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                  "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
        for p in paths:
            if not os.path.exists(p):
                raise FileNotFoundError(
                    f"sMNIST requires IDX files under the data root; missing {p}")
        train = data_mod.load_mnist_idx(paths[0], paths[1], "train")
        test = data_mod.load_mnist_idx(paths[2], paths[3], "test")
    else:  # sCIFAR
        root = _data_root(cfg)
        batches = [os.path.join(root, f"data_batch_{i}.bin") for i in range(1, 6)]
        test_b = os.path.join(root, "test_batch.bin")
        for p in batches + [test_b]:
            if not os.path.exists(p):
                raise FileNotFoundError(
                    f"sCIFAR requires binary batches under the data root; missing {p}")
        train = data_mod.load_cifar_gray(batches, "train")
        test = data_mod.load_cifar_gray([test_b], "test")
    if cfg.train_limit:
        train = train.subset(np.arange(min(cfg.train_limit, len(train))), "train")
    return train, test


class AdamW:
    """Decoupled-weight-decay Adam over the model's parameter groups."""

    def __init__(self, params, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, schedule=1.0):
        """One update; ``schedule`` scales every group's base rate."""
        self.t += 1
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            g = p.tensor.grad
            if g is None:
                continue
            base = min(self.lr, SSM_LR_CAP) if p.group == "ssm" else self.lr
            lr_t = base * schedule
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.tensor.data -= lr_t * mhat / (np.sqrt(vhat) + self.eps)
            if p.group != "ssm" and self.weight_decay:
                p.tensor.data -= lr_t * self.weight_decay * p.tensor.data


def _accuracy(logits, labels):
    return float((logits.argmax(axis=1) == labels).mean())


def eval_model(model, dataset, batch_size=256, collect_spikes=None):
    """Deterministic eval-mode accuracy and mean loss over a dataset."""
    losses, correct, total = [], 0, 0
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            xb = dataset.sequences[start:start + batch_size]
            yb = dataset.labels[start:start + batch_size]
            logits = model.forward(xb, training=False, collect=collect_spikes)
            losses.append(ad.softmax_cross_entropy(logits, yb).data * len(xb))
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            total += len(xb)
    return correct / total, float(np.sum(losses) / total)


def train(cfg: TrainConfig, train_set=None, test_set=None, log=print):
    """Full training loop; returns (best_checkpoint_path, metrics_path)."""
    cfg.validate()
    if train_set is None or test_set is None:
        train_set, test_set = load_task_datasets(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    model = Model(model_config(cfg))
    opt = AdamW(model.params(), cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    config_text = cfg.to_text()
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    best_path = os.path.join(cfg.out_dir, "best.ckpt")
    save_checkpoint(best_path, config_text, model.state_arrays())

    n = len(train_set)
    steps_per_epoch = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    best_acc = -1.0
    t0 = time.monotonic()
    with open(metrics_path, "w", newline="") as mf:
        writer = csv.writer(mf)
        writer.writerow(["epoch", "train_loss", "train_acc", "test_acc", "wall_time"])
        mf.flush()
        step = 0
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            ep_loss, ep_correct = 0.0, 0
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                xb = train_set.sequences[idx]
                yb = train_set.labels[idx]
                logits = model.forward(xb, training=True, rng=rng)
                loss = ad.softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss.data):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch} step {step}: {loss.data}")
                model.zero_grad()
                loss.backward()
                schedule = 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
                opt.step(schedule)
                step += 1
                ep_loss += float(loss.data) * len(idx)
                ep_correct += int((logits.data.argmax(axis=1) == yb).sum())
            train_loss = ep_loss / n
            train_acc = ep_correct / n
            test_acc, _ = eval_model(model, test_set)
            wall = time.monotonic() - t0
            writer.writerow([epoch, f"{train_loss:.6f}", f"{train_acc:.4f}",
                             f"{test_acc:.4f}", f"{wall:.2f}"])
            mf.flush()
            log(f"epoch {epoch}: loss {train_loss:.4f} train {train_acc:.4f} "
                f"test {test_acc:.4f} ({wall:.1f}s)")
            if test_acc > best_acc:
                best_acc = test_acc
                save_checkpoint(best_path, config_text, model.state_arrays())
    return best_path, metrics_path


def load_model(checkpoint_path):
    """Rebuild a model (and its TrainConfig) from a checkpoint."""
    config_text, arrays = load_checkpoint(checkpoint_path)
    cfg = parse_config(text=config_text)
    model = Model(model_config(cfg))
    model.load_state_arrays(arrays)
    return model, cfg


def evaluate(checkpoint_path, dataset):
    """Eval metrics plus firing rate and mixer op accounting."""
    model, cfg = load_model(checkpoint_path)
    collect = {"spike_rates": []}
    acc, loss = eval_model(model, dataset, collect_spikes=collect)
    rates = collect["spike_rates"]
    spike_rate = float(np.mean(rates)) if rates else 0.0

    blk = model.blocks[0]
    H = cfg.features
    probe = dataset.sequences[0]
    x_pos = np.asarray(probe[:H] if len(probe) >= H else np.resize(probe, H), dtype=float)
    if cfg.mixer == "gsu":
        params = gsu_mod.GSULayerParams(blk.mix_W.data, blk.mix_b.data, blk.mix_c.data)
        counter = gsu_mod.audit_ops(
            lambda cnt: gsu_mod.gsu_forward(params, x_pos, cnt), label="gsu")
    else:
        params = gsu_mod.GLULayerParams(blk.mix_W.data, blk.mix_V.data,
                                        blk.mix_b.data, blk.mix_c.data)
        counter = gsu_mod.audit_ops(
            lambda cnt: gsu_mod.glu_forward(params, x_pos, cnt), label="glu")
    return {
        "accuracy": acc,
        "loss": loss,
        "spike_rate": spike_rate,
        "op_report": {"label": counter.label, "multiplies": counter.multiplies,
                      "adds": counter.adds},
    }


def infer_iterative(checkpoint_path, sequence):
    """Stream one sequence through the scan path (unidirectional models)."""
    model, _ = load_model(checkpoint_path)
    return model.forward_iterative(sequence)
