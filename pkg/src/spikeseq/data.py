"""Dataset ingestion: IDX images, CIFAR binary batches, synthetic probes.

Images are flattened row-major to scalar pixel sequences in [0, 1],
one value per time step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD_BYTES = 1 + 3072


class FormatError(ValueError):
    pass


@dataclass
class SequenceDataset:
    sequences: np.ndarray      # (N, L) float64 in [0, 1]
    labels: np.ndarray         # (N,) int64
    n_classes: int
    split: str = ""

    def __post_init__(self):
        if self.sequences.shape[0] != self.labels.shape[0]:
            raise ValueError("sample/label count mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels out of range")

    @property
    def length(self):
        return self.sequences.shape[1]

    def __len__(self):
        return self.sequences.shape[0]

    def subset(self, idx, split=None):
        return SequenceDataset(self.sequences[idx], self.labels[idx],
                               self.n_classes, split or self.split)


def load_mnist_idx(images_path, labels_path, split=""):
    """Standard IDX pair -> 784-long row-major pixel sequences, /255."""
    with open(images_path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise FormatError("truncated IDX image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise FormatError(f"bad IDX image magic {magic}")
        payload = f.read(count * rows * cols)
        if len(payload) != count * rows * cols:
            raise FormatError("truncated IDX image payload")
    with open(labels_path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise FormatError("truncated IDX label header")
        magic, lcount = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise FormatError(f"bad IDX label magic {magic}")
        labels = np.frombuffer(f.read(lcount), dtype=np.uint8)
        if labels.size != lcount:
            raise FormatError("truncated IDX label payload")
    if count != lcount:
        raise FormatError(f"image/label count mismatch: {count} vs {lcount}")
    seqs = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    return SequenceDataset(seqs.astype(np.float64) / 255.0,
                           labels.astype(np.int64), 10, split)


def load_cifar_gray(batch_files, split=""):
    """CIFAR binary batches -> 1024-long grayscale sequences.

    Each record is one label byte plus channel-planar R,G,B planes;
    luminance is 0.299R + 0.587G + 0.114B, then /255.
    """
    seqs, labels = [], []
    for path in batch_files:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) % CIFAR_RECORD_BYTES != 0:
            raise FormatError(f"truncated CIFAR record in {path}")
        n = len(raw) // CIFAR_RECORD_BYTES
        recs = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
        labels.append(recs[:, 0].astype(np.int64))
        planes = recs[:, 1:].reshape(n, 3, 1024).astype(np.float64)
        gray = 0.299 * planes[:, 0] + 0.587 * planes[:, 1] + 0.114 * planes[:, 2]
        seqs.append(gray / 255.0)
    return SequenceDataset(np.concatenate(seqs), np.concatenate(labels), 10, split)


def synth_first_token_recall(L, n_classes, n_samples, seed, split="", noise=0.02):
    """Noise sequences whose class is encoded only in position 0.

    The first element is (label + 0.5) / n_classes; everything after is
    uniform noise on [0, ``noise``]. A long-range memory probe: the
    informative element arrives as an impulse against a near-silent
    tail, so solving the task requires dynamics slow enough to carry
    position 0 across the whole sequence. The tail amplitude is kept
    small because a sustained background excites a slow integrator with
    gain ~1/delta while an impulse only couples with gain ~delta; a
    full-scale tail buries the class signal entirely.
    """
    if L < 2:
        raise ValueError("need L >= 2")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise width must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, n_samples)
    seqs = rng.random((n_samples, L)) * noise
    seqs[:, 0] = (labels + 0.5) / n_classes
    return SequenceDataset(seqs, labels.astype(np.int64), n_classes, split)


def unflatten_image(sequence, rows, cols):
    """Inverse of the row-major flattening (roundtrip testing helper)."""
    return np.asarray(sequence).reshape(rows, cols)
