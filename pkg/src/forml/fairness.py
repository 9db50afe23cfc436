"""Group fairness metrics and differentiable fairness meta-losses."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ForMLError, ShapeError


class FairLossKind(enum.Enum):
    MAX_LOSS_D = "max_loss_d"
    MEAN_LOSS_D = "mean_loss_d"
    CROSS_ENTROPY = "cross_entropy"


@dataclass
class GroupStats:
    """Confusion counts per group, keyed by group id (sorted)."""

    groups: np.ndarray
    tp: np.ndarray
    fn: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    count: np.ndarray
    mean_loss: np.ndarray = field(default=None)

    def tpr(self) -> dict:
        """TPR per group, only for groups with at least one positive."""
        pos = self.tp + self.fn
        return {int(g): self.tp[k] / pos[k] for k, g in enumerate(self.groups) if pos[k] > 0}


def _lengths_match(*arrays):
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise ShapeError(f"length mismatch: {[len(a) for a in arrays]}")
    if n == 0:
        raise ForMLError("empty evaluation set")


def group_confusion(predictions, targets, attrs, positive_label=None, losses=None) -> GroupStats:
    """Per-group confusion counts.

    For a binary task pass ``positive_label``. Without it, group ``a`` is
    scored one-vs-rest for class ``a``, so with class-as-group attributes the
    group TPR is the recall of that class.
    """
    pred = np.asarray(predictions)
    y = np.asarray(targets)
    a = np.asarray(attrs)
    _lengths_match(pred, y, a)
    if losses is not None:
        losses = np.asarray(losses, dtype=np.float64)
        _lengths_match(pred, losses)
    groups = np.unique(a)
    stats = {k: np.zeros(len(groups), dtype=np.int64) for k in ("tp", "fn", "fp", "tn", "count")}
    mean_loss = np.zeros(len(groups)) if losses is not None else None
    for k, g in enumerate(groups):
        member = a == g
        pos_label = g if positive_label is None else positive_label
        is_pos = y[member] == pos_label
        said_pos = pred[member] == pos_label
        stats["tp"][k] = np.sum(is_pos & said_pos)
        stats["fn"][k] = np.sum(is_pos & ~said_pos)
        stats["fp"][k] = np.sum(~is_pos & said_pos)
        stats["tn"][k] = np.sum(~is_pos & ~said_pos)
        stats["count"][k] = member.sum()
        if losses is not None:
            mean_loss[k] = losses[member].mean()
    return GroupStats(groups, mean_loss=mean_loss, **stats)


def _defined_tprs(stats: GroupStats) -> list:
    # exact rationals from the counts; rounded to float once at the end
    pos = stats.tp + stats.fn
    tprs = [Fraction(int(t), int(p)) for t, p in zip(stats.tp, pos) if p > 0]
    if len(tprs) < 2:
        raise ForMLError(f"need at least 2 groups with positives, found {len(tprs)}")
    return tprs


def tprd(stats: GroupStats) -> float:
    """True positive rate disparity: max minus min group TPR."""
    tprs = _defined_tprs(stats)
    return float(max(tprs) - min(tprs))


def max_fnr(stats: GroupStats) -> float:
    return float(1 - min(_defined_tprs(stats)))


def accuracy(predictions, targets) -> float:
    pred = np.asarray(predictions)
    y = np.asarray(targets)
    _lengths_match(pred, y)
    return float(np.mean(pred == y))


def fair_loss(per_sample_losses, attrs, kind: FairLossKind):
    """Fairness loss value and its (sub)gradient w.r.t. each per-sample loss.

    MaxLossD = max_a mean_a - min_a mean_a. When several groups tie for the
    max (or min), that group's unit of gradient mass is split equally.
    MeanLossD = mean over present groups of |mean_a - overall mean|, with
    sign(0) = 0. CrossEntropy is the plain mean loss.
    """
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    a = np.asarray(attrs)
    _lengths_match(losses, a)
    n = len(losses)
    if kind is FairLossKind.CROSS_ENTROPY:
        return float(losses.mean()), np.full(n, 1.0 / n)

    groups, inv, counts = np.unique(a, return_inverse=True, return_counts=True)
    if len(groups) < 2:
        raise ForMLError(f"{kind.value} needs at least 2 groups in the batch, found {len(groups)}")
    means = np.bincount(inv, weights=losses) / counts

    if kind is FairLossKind.MAX_LOSS_D:
        hi, lo = means.max(), means.min()
        top = means == hi
        bottom = means == lo
        coef = top / top.sum() - bottom / bottom.sum()
        value = hi - lo
    elif kind is FairLossKind.MEAN_LOSS_D:
        overall = losses.mean()
        signs = np.sign(means - overall)
        value = np.abs(means - overall).mean()
        coef = signs / len(groups)
        # each group's deviation also depends on every loss through the overall mean
        return float(value), coef[inv] / counts[inv] - coef.sum() / n
    else:
        raise ForMLError(f"unknown fairness loss {kind}")
    return float(value), coef[inv] / counts[inv]
