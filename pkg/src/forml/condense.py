"""Weight-driven dataset condensation.

Pipeline: (1) uniform training while counting forgetting events; (2) joint
weight training with the least-forgotten samples as the exemplar set,
collecting the EMA of normalized weighted losses; (3) drop the
lowest-EMA fraction of the training set; (4) retrain uniformly on the full
set, the condensed set, and a random subset of the same size.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, Split
from .errors import ForMLError
from .model import init_mlp
from .trainer import TrainConfig, evaluate, select_exemplar_by_forgetting, train_baseline, train_forml
from .weights import EmaTracker

ARMS = ("uniform_full", "forml_condensed", "random_subset")


def condense(split: Split, ema: EmaTracker, fraction: float):
    """Remove the ``floor(fraction * N)`` lowest-EMA training samples (ties:
    lower index first). Returns ``(retained dataset, retained indices)``."""
    if not 0.0 <= fraction < 1.0:
        raise ForMLError(f"fraction must be in [0, 1), got {fraction}")
    n = len(split.train)
    if len(ema) != n:
        raise ForMLError(f"EMA covers {len(ema)} samples, training set has {n}")
    missing = ema.uninitialized()
    if missing.size:
        raise ForMLError(f"EMA never observed samples {missing[:20].tolist()}"
                         + (" ..." if missing.size > 20 else ""))
    k = int(np.floor(fraction * n))
    order = np.lexsort((np.arange(n), ema.value))
    keep = np.sort(order[k:])
    return split.train.subset(keep), keep


@dataclass
class CondensationConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: tuple = (64, 64)
    exemplar_size: int = 1000
    fraction: float = 0.1
    forgetting_epochs: int | None = None  # None: train.epochs
    seed: int = 0


def _fixed_epochs(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, patience=None, seed=seed)


def run_condensation_pipeline(train_data: Dataset, test_data: Dataset, cfg: CondensationConfig) -> dict:
    """Runs all four stages and returns per-arm test metrics plus artifacts.

    The forgetting-selected exemplar is drawn from the training set and stays
    in it, so the condensed size is a fraction of the full training set.
    """
    seed = cfg.seed
    dims = [train_data.x.shape[1], *cfg.hidden, train_data.num_classes]
    full_index = np.arange(len(train_data))

    # stage 1: forgetting events under uniform training
    stage1_cfg = _fixed_epochs(cfg.train, seed)
    if cfg.forgetting_epochs is not None:
        stage1_cfg = replace(stage1_cfg, epochs=cfg.forgetting_epochs)
    probe = Split(train_data, train_data, full_index, full_index)
    stage1 = train_baseline(probe, init_mlp(dims, seed), stage1_cfg, "uniform", track_forgetting_events=True)
    exemplar_index = select_exemplar_by_forgetting(stage1.forgetting, cfg.exemplar_size)

    # stage 2: joint weight training on the full set against that exemplar
    split = Split(train_data, train_data.subset(exemplar_index), full_index, exemplar_index)
    stage2 = train_forml(split, init_mlp(dims, seed), replace(cfg.train, seed=seed))

    # stage 3: condense; stage 4: retrain the three arms
    _, keep = condense(split, stage2.ema, cfg.fraction)
    rng = np.random.default_rng([seed, 3])
    random_keep = np.sort(rng.choice(len(train_data), size=len(keep), replace=False))
    arms = {
        "uniform_full": full_index,
        "forml_condensed": keep,
        "random_subset": random_keep,
    }
    retrain_cfg = _fixed_epochs(cfg.train, seed)
    rows = {}
    for arm, idx in arms.items():
        sub = train_data.subset(idx)
        arm_split = Split(sub, split.exemplar, idx, exemplar_index)
        result = train_baseline(arm_split, init_mlp(dims, seed), retrain_cfg, "uniform")
        metrics = evaluate(result.params, test_data, retrain_cfg)
        rows[arm] = {"size": len(idx), **metrics}
    return {
        "rows": rows,
        "exemplar_index": exemplar_index,
        "kept_index": keep,
        "random_index": random_keep,
        "ema": stage2.ema,
        "store": stage2.store,
        "forgetting": stage1.forgetting,
    }
