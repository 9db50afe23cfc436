"""Global per-sample weights, batch softmax, and the EMA of weighted losses.

``WeightStore`` and ``EmaTracker`` are mutated in place by a single training
loop; they are not safe for concurrent mutation.
"""
from __future__ import annotations

import csv
import enum
import os
from dataclasses import dataclass

import numpy as np

from .errors import ForMLError, NonFiniteError, ShapeError


class WeightStrategy(enum.Enum):
    LOSS = "loss"  # weights multiply per-sample losses
    LOGITS = "logits"  # weights scale logits before the loss (n * s_i)


class WeightStore:
    """One learnable logit ``w[i]`` per training sample; starts at 0 (uniform)."""

    def __init__(self, n: int, lr_weights: float = 0.0, init=None):
        if init is None:
            self.w = np.zeros(int(n))
        else:
            self.w = np.array(init, dtype=np.float64)
            if self.w.shape != (n,):
                raise ShapeError(f"initial weights of shape {self.w.shape} for {n} samples")
        if not np.all(np.isfinite(self.w)):
            raise NonFiniteError("initial weights are not finite")
        self.lr_weights = float(lr_weights)

    def __len__(self):
        return len(self.w)

    def copy(self) -> "WeightStore":
        return WeightStore(len(self.w), self.lr_weights, self.w)


@dataclass(frozen=True)
class BatchWeights:
    indices: np.ndarray
    s: np.ndarray


def _as_indices(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size == 0:
        raise ForMLError("empty index batch")
    bad = np.flatnonzero((idx < 0) | (idx >= n))
    if bad.size:
        raise ForMLError(f"index {idx[bad[0]]} out of range for {n} samples")
    return idx


def softmax_vector(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    e = np.exp(w - w.max())
    return e / e.sum()


def batch_softmax(store: WeightStore, indices) -> BatchWeights:
    """Softmax of ``w`` restricted to the batch. Duplicates get their own slot."""
    idx = _as_indices(indices, len(store.w))
    return BatchWeights(idx, softmax_vector(store.w[idx]))


def apply_weights(per_sample_losses, bw: BatchWeights,
                  strategy: WeightStrategy = WeightStrategy.LOSS) -> float:
    """Weighted batch loss ``sum_i s_i * loss_i``.

    The logits strategy applies weights inside the forward pass, so it has no
    meaning here.
    """
    if strategy is not WeightStrategy.LOSS:
        raise ForMLError("logits-multiplicative weights are applied during the forward pass")
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    if losses.shape != bw.s.shape:
        raise ShapeError(f"{losses.size} losses for {bw.s.size} weights")
    return float(bw.s @ losses)


def update_weights(store: WeightStore, indices, delta_f) -> None:
    """``w[idx_i] -= lr_weights * delta_f[i]`` once per occurrence."""
    idx = _as_indices(indices, len(store.w))
    delta = np.asarray(delta_f, dtype=np.float64)
    if delta.shape != idx.shape:
        raise ShapeError(f"{delta.size} deltas for {idx.size} indices")
    bad = np.flatnonzero(~np.isfinite(delta))
    if bad.size:
        raise NonFiniteError("non-finite weight gradient", index=int(bad[0]))
    np.subtract.at(store.w, idx, store.lr_weights * delta)


def normalized_weighted_loss(s, losses) -> np.ndarray:
    """``(s_i * n) * loss_i``: a uniformly weighted sample has weight 1."""
    s = np.asarray(s, dtype=np.float64)
    return s * len(s) * np.asarray(losses, dtype=np.float64)


class EmaTracker:
    """Per-sample EMA; the first observation seeds the value directly."""

    def __init__(self, n: int, alpha: float = 0.9):
        if not 0.0 <= alpha < 1.0:
            raise ForMLError(f"alpha must be in [0, 1), got {alpha}")
        self.alpha = float(alpha)
        self.value = np.zeros(int(n))
        self.initialized = np.zeros(int(n), dtype=bool)

    def __len__(self):
        return len(self.value)

    def uninitialized(self) -> np.ndarray:
        return np.flatnonzero(~self.initialized)


def ema_update(t: EmaTracker, index: int, x: float) -> None:
    if not 0 <= index < len(t.value):
        raise ForMLError(f"index {index} out of range for {len(t.value)} samples")
    if not np.isfinite(x):
        raise NonFiniteError("non-finite EMA observation", index=int(index))
    if t.initialized[index]:
        t.value[index] = t.alpha * t.value[index] + (1.0 - t.alpha) * x
    else:
        t.value[index] = x
        t.initialized[index] = True


def ema_update_many(t: EmaTracker, indices, xs) -> None:
    idx = np.asarray(indices, dtype=np.int64)
    xs = np.asarray(xs, dtype=np.float64)
    if np.unique(idx).size != idx.size:
        for i, x in zip(idx, xs):
            ema_update(t, int(i), float(x))
        return
    _as_indices(idx, len(t.value))
    bad = np.flatnonzero(~np.isfinite(xs))
    if bad.size:
        raise NonFiniteError("non-finite EMA observation", index=int(idx[bad[0]]))
    seen = t.initialized[idx]
    t.value[idx] = np.where(seen, t.alpha * t.value[idx] + (1.0 - t.alpha) * xs, xs)
    t.initialized[idx] = True


def write_weights_csv(dest, store: WeightStore, ema: EmaTracker | None = None) -> None:
    """Rows of (sample_index, weight, ema_weighted_loss) to a path or text
    stream; the EMA cell is empty for samples never observed."""
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", newline="") as fh:
            write_weights_csv(fh, store, ema)
        return
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(["sample_index", "weight", "ema_weighted_loss"])
    for i, w in enumerate(store.w):
        ema_cell = ""
        if ema is not None and ema.initialized[i]:
            ema_cell = f"{ema.value[i]:.6f}"
        writer.writerow([i, f"{w:.6f}", ema_cell])
