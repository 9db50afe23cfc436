"""Joint training of sample weights and model parameters, plus static baselines.

One training step (:func:`forml_step`) does, for a training batch at
parameters ``theta``:

1. ``s = softmax(w[batch])``
2. per-sample gradients ``g_i`` at ``theta``; ``delta_c = sum_i s_i g_i``
3. a look-ahead step ``theta_tilde = theta - sign * lr_model * delta_c``
   (``sign = -1`` for the reverse update)
4. ``u``: gradient of the fairness loss on an exemplar batch at ``theta_tilde``
5. the exact meta-gradient w.r.t. the batch weights,
   ``delta_f[k] = -sign * lr_model * s_k * (<g_k, u> - <delta_c, u>)``
6. ``w -= lr_weights * delta_f``
7. ``delta_c_new = sum_i s'_i g_i`` with the updated weights ``s'``, reusing the
   ``g_i`` from step 2
8. ``theta_next = theta - lr_final_step * delta_c_new``

Step 5 is closed form: ``g_i`` do not depend on ``w`` and ``delta_c`` is linear
in ``s``, so the chain rule through the look-ahead step collapses to dot
products and no Hessian-vector products are needed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, Split, batches_per_epoch, sample_fair, sample_uniform
from .errors import ForMLError, NonFiniteError
from .fairness import FairLossKind, accuracy, fair_loss, group_confusion, max_fnr, tprd
from .grad import backprop, ce_losses_and_dlogits, dot, per_sample_dots, record, weighted_sum
from .model import ModelParams, forward, log_softmax, per_sample_loss, sgd_step
from .weights import (
    EmaTracker,
    WeightStore,
    WeightStrategy,
    batch_softmax,
    ema_update_many,
    normalized_weighted_loss,
    update_weights,
)

log = logging.getLogger(__name__)

BASELINES = ("uniform", "random", "proportional")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    lr_model: float = 0.1
    lr_weights: float | None = None  # None: same as lr_model
    lr_final_step: float | None = None  # None: same as lr_model
    meta_loss: FairLossKind = FairLossKind.MAX_LOSS_D
    weight_strategy: WeightStrategy = WeightStrategy.LOSS
    reverse_model_update: bool = True
    reverse_weight_update: bool = False
    min_per_stratum: int = 3
    exemplar_batch_size: int | None = None  # None: same as batch_size
    patience: int | None = 3  # None: early stopping off
    ema_alpha: float = 0.9
    positive_label: int | None = 1  # binary tasks with a separate sensitive attribute
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.meta_loss, str):
            self.meta_loss = FairLossKind(self.meta_loss)
        if isinstance(self.weight_strategy, str):
            self.weight_strategy = WeightStrategy(self.weight_strategy)
        if self.lr_model <= 0:
            raise ForMLError(f"lr_model must be positive, got {self.lr_model}")
        if self.lr_weights is not None and self.lr_weights < 0:
            raise ForMLError(f"lr_weights must be non-negative, got {self.lr_weights}")
        if self.lr_final_step is not None and self.lr_final_step <= 0:
            raise ForMLError(f"lr_final_step must be positive, got {self.lr_final_step}")
        if self.patience is not None and self.patience < 1:
            raise ForMLError(f"patience must be >= 1, got {self.patience}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ForMLError("epochs must be >= 0 and batch_size >= 1")

    @property
    def eta_f(self) -> float:
        return self.lr_model if self.lr_weights is None else self.lr_weights

    @property
    def eta_final(self) -> float:
        return self.lr_model if self.lr_final_step is None else self.lr_final_step


@dataclass
class GradientBundle:
    delta_c: np.ndarray
    theta_tilde: ModelParams
    u: np.ndarray
    delta_f: np.ndarray
    delta_c_new: np.ndarray
    s: np.ndarray
    s_new: np.ndarray
    train_losses: np.ndarray
    meta_loss_value: float


@dataclass
class ForgettingTracker:
    """Forgetting events: a correct-to-incorrect flip between evaluations."""

    prev_correct: np.ndarray
    events: np.ndarray
    ever_correct: np.ndarray

    @classmethod
    def create(cls, n: int) -> "ForgettingTracker":
        return cls(np.zeros(n, dtype=bool), np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool))


@dataclass
class TrainResult:
    params: ModelParams
    store: WeightStore
    ema: EmaTracker
    history: list = field(default_factory=list)
    forgetting: ForgettingTracker | None = None
    best_epoch: int = -1
    epochs_run: int = 0


def _finite(arr, what, step):
    arr = np.asarray(arr)
    bad = np.flatnonzero(~np.isfinite(arr.ravel()))
    if bad.size:
        raise NonFiniteError(f"non-finite {what}", index=int(bad[0]), step=step)


def _strategy_signals(tape, targets, s, strategy, step):
    """Per-sample training losses and the backprop signals needed by a step.

    Returns ``(losses, meta_deltas, weighted)``: ``weighted(s)`` gives
    ``delta_c`` for simplex weights ``s`` (always at the recorded parameters),
    and ``meta_deltas`` backpropagate to the per-sample vectors
    ``d delta_c / d s_k`` whose projections onto ``u`` enter the meta-gradient.
    """
    losses, dlogits = ce_losses_and_dlogits(tape.logits, targets, step=step)
    if strategy is WeightStrategy.LOSS:
        deltas = backprop(tape, dlogits)
        return losses, deltas, lambda w: weighted_sum(tape, deltas, w)

    # Logits strategy: sample i contributes CE(c_i z_i) / n with c_i = n s_i.
    # d delta_c / d s_i = J_i^T r_i, r_i = (p_i - e_i) + c_i (diag(p_i) - p_i p_i^T) z_i.
    n = tape.batch_size
    z = tape.logits
    rows = np.arange(n)

    def scaled(w):
        c = n * np.asarray(w)
        p = np.exp(log_softmax(c[:, None] * z))
        pe = p.copy()
        pe[rows, targets] -= 1.0
        return c, p, pe

    def weighted(w):
        _, _, pe = scaled(w)
        return weighted_sum(tape, backprop(tape, pe), w)

    c, p, pe = scaled(s)
    r = pe + c[:, None] * (p * z - p * (p * z).sum(axis=1, keepdims=True))
    return losses, backprop(tape, r), weighted


def forml_step(params: ModelParams, store: WeightStore, train_batch: Dataset, indices,
               exemplar_batch: Dataset, cfg: TrainConfig):
    """One joint weight/parameter update. Mutates ``store``; returns
    ``(new_params, GradientBundle)``."""
    indices = np.asarray(indices, dtype=np.int64)
    s = batch_softmax(store, indices).s
    tape = record(params, train_batch.x)
    losses, meta_deltas, weighted = _strategy_signals(tape, train_batch.y, s, cfg.weight_strategy, step=7)
    delta_c = weighted(s)
    _finite(delta_c, "training gradient", 7)

    sign = -1.0 if cfg.reverse_model_update else 1.0
    theta_flat = params.flatten()
    tilde_flat = theta_flat - sign * cfg.lr_model * delta_c
    _finite(tilde_flat, "look-ahead parameters", 8)
    theta_tilde = params.unflatten(tilde_flat)

    ex_tape = record(theta_tilde, exemplar_batch.x)
    ex_losses, ex_dlogits = ce_losses_and_dlogits(ex_tape.logits, exemplar_batch.y, step=10)
    meta_value, dmeta = fair_loss(ex_losses, exemplar_batch.a, cfg.meta_loss)
    u = weighted_sum(ex_tape, backprop(ex_tape, ex_dlogits), dmeta)
    q = per_sample_dots(tape, meta_deltas, u)
    if cfg.weight_strategy is WeightStrategy.LOSS:
        q_bar = dot(delta_c, u)
    else:
        q_bar = float(s @ q)
    delta_f = -sign * cfg.lr_model * s * (q - q_bar)
    if cfg.reverse_weight_update:
        delta_f = -delta_f
    _finite(delta_f, "weight gradient", 10)

    store.lr_weights = cfg.eta_f
    update_weights(store, indices, delta_f)
    _finite(store.w[indices], "sample weights", 11)

    s_new = batch_softmax(store, indices).s
    delta_c_new = weighted(s_new)
    _finite(delta_c_new, "reweighted training gradient", 12)
    new_flat = theta_flat - cfg.eta_final * delta_c_new
    _finite(new_flat, "updated parameters", 13)
    bundle = GradientBundle(delta_c, theta_tilde, u, delta_f, delta_c_new, s, s_new, losses, meta_value)
    return params.unflatten(new_flat), bundle


def weighted_sgd_step(params: ModelParams, batch: Dataset, s, lr: float):
    """Plain SGD on ``sum_i s_i * loss_i``. Returns ``(new_params, losses)``."""
    tape = record(params, batch.x)
    losses, dlogits = ce_losses_and_dlogits(tape.logits, batch.y, step=7)
    grad = weighted_sum(tape, backprop(tape, dlogits), s)
    _finite(grad, "training gradient", 12)
    return sgd_step(params, grad, lr), losses


# --- evaluation ------------------------------------------------------------

def evaluate(params: ModelParams, data: Dataset, cfg: TrainConfig, meta_loss: FairLossKind | None = None) -> dict:
    """Accuracy, TPRD, maxFNR (and the fairness loss) of ``params`` on ``data``."""
    logits = forward(params, data.x)
    pred = logits.argmax(axis=1)
    positive = None if data.class_as_group else cfg.positive_label
    stats = group_confusion(pred, data.y, data.a, positive_label=positive)
    try:
        gap, worst = tprd(stats), max_fnr(stats)
    except ForMLError:
        gap = worst = float("nan")
    out = {"accuracy": accuracy(pred, data.y), "tprd": gap, "max_fnr": worst}
    kind = meta_loss or cfg.meta_loss
    try:
        out["meta_loss_value"] = fair_loss(per_sample_loss(logits, data.y), data.a, kind)[0]
    except ForMLError:
        out["meta_loss_value"] = float("nan")
    return out


def track_forgetting(tracker: ForgettingTracker, per_sample_correct, indices) -> None:
    correct = np.asarray(per_sample_correct, dtype=bool)
    idx = np.asarray(indices, dtype=np.int64)
    if correct.shape != idx.shape:
        raise ForMLError(f"{correct.size} correctness flags for {idx.size} indices")
    forgot = tracker.prev_correct[idx] & ~correct
    tracker.events[idx] += forgot
    tracker.ever_correct[idx] |= correct
    tracker.prev_correct[idx] = correct


def select_exemplar_by_forgetting(tracker: ForgettingTracker, n: int) -> np.ndarray:
    """The ``n`` ever-learned samples with fewest forgetting events (ties by index)."""
    eligible = np.flatnonzero(tracker.ever_correct)
    if len(eligible) < n:
        raise ForMLError(f"only {len(eligible)} samples were ever classified correctly, {n} requested")
    order = np.lexsort((eligible, tracker.events[eligible]))
    return np.sort(eligible[order[:n]])


# --- training loops --------------------------------------------------------

class _EarlyStopper:
    def __init__(self, patience):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.best_params = None
        self.bad_epochs = 0

    def update(self, epoch, score, params) -> bool:
        """Record an epoch; return True when training should stop."""
        if self.patience is None:
            self.best_epoch, self.best_params = epoch, params
            return False
        if score > self.best:
            self.best, self.best_epoch, self.best_params = score, epoch, params
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _epoch_end(epoch, params, split, cfg, eval_sets, history, stopper, forgetting):
    for name, data in [("exemplar", split.exemplar)] + list((eval_sets or {}).items()):
        row = {"epoch": epoch, "split": name}
        row.update(evaluate(params, data, cfg))
        history.append(row)
    if forgetting is not None:
        correct = forward(params, split.train.x).argmax(axis=1) == split.train.y
        track_forgetting(forgetting, correct, np.arange(len(split.train)))
    score = next(r["accuracy"] for r in reversed(history) if r["split"] == "exemplar" and r["epoch"] == epoch)
    return stopper.update(epoch, score, params)


def _run(split: Split, model_init: ModelParams, cfg: TrainConfig, store: WeightStore, step_fn,
         eval_sets=None, track_forgetting_events=False, on_step=None) -> TrainResult:
    n = len(split.train)
    ema = EmaTracker(n, cfg.ema_alpha)
    forgetting = ForgettingTracker.create(n) if track_forgetting_events else None
    result = TrainResult(model_init, store, ema, forgetting=forgetting)
    stopper = _EarlyStopper(cfg.patience)
    params = model_init
    per_epoch = batches_per_epoch(n, cfg.batch_size)
    step = 0
    for epoch in range(cfg.epochs):
        for _ in range(per_epoch):
            idx = sample_uniform(split, cfg.batch_size, cfg.seed, step)
            params, s_used, losses = step_fn(params, idx, step)
            ema_update_many(ema, idx, normalized_weighted_loss(s_used, losses))
            if on_step is not None:
                on_step(step, params)
            step += 1
        result.epochs_run = epoch + 1
        if _epoch_end(epoch, params, split, cfg, eval_sets, result.history, stopper, forgetting):
            log.info("early stop after epoch %d (best %d)", epoch, stopper.best_epoch)
            break
    if stopper.best_params is not None:
        result.params = stopper.best_params
        result.best_epoch = stopper.best_epoch
    return result


def train_forml(split: Split, model_init: ModelParams, cfg: TrainConfig, eval_sets=None,
                track_forgetting_events=False, on_step=None) -> TrainResult:
    """Joint training over ``cfg.epochs`` epochs; returns the best-on-exemplar
    parameters when early stopping is on, else the final ones."""
    store = WeightStore(len(split.train), cfg.eta_f)
    ex_bs = cfg.exemplar_batch_size or cfg.batch_size

    def step_fn(params, idx, step):
        ex_idx = sample_fair(split, ex_bs, cfg.min_per_stratum, cfg.seed, step)
        new_params, bundle = forml_step(params, store, split.train.subset(idx), idx,
                                        split.exemplar.subset(ex_idx), cfg)
        return new_params, bundle.s_new, bundle.train_losses

    return _run(split, model_init, cfg, store, step_fn, eval_sets, track_forgetting_events, on_step)


def baseline_raw_weights(train: Dataset, weighting: str, seed: int) -> tuple[WeightStore, bool]:
    """Static weights for a baseline. Returns ``(store, softmax_normalize)``:
    softmax-normalized per batch for uniform/random, plain normalization for
    proportional (inverse stratum frequency)."""
    n = len(train)
    if weighting == "uniform":
        return WeightStore(n), True
    if weighting == "random":
        rng = np.random.default_rng([seed, 7])
        return WeightStore(n, init=rng.uniform(0.0, 1.0, size=n)), True
    if weighting == "proportional":
        strata = train.y if train.class_as_group else train.a
        counts = np.bincount(strata)
        return WeightStore(n, init=1.0 / counts[strata]), False
    raise ForMLError(f"unknown baseline weighting {weighting!r}")


def train_baseline(split: Split, model_init: ModelParams, cfg: TrainConfig, weighting: str = "uniform",
                   eval_sets=None, track_forgetting_events=False, on_step=None) -> TrainResult:
    """SGD on the loss weighted by fixed per-sample weights."""
    store, use_softmax = baseline_raw_weights(split.train, weighting, cfg.seed)

    def step_fn(params, idx, step):
        if use_softmax:
            s = batch_softmax(store, idx).s
        else:
            raw = store.w[idx]
            s = raw / raw.sum()
        new_params, losses = weighted_sgd_step(params, split.train.subset(idx), s, cfg.eta_final)
        return new_params, s, losses

    return _run(split, model_init, cfg, store, step_fn, eval_sets, track_forgetting_events, on_step)


def train(method: str, split: Split, model_init: ModelParams, cfg: TrainConfig, **kwargs) -> TrainResult:
    if method == "forml":
        return train_forml(split, model_init, cfg, **kwargs)
    return train_baseline(split, model_init, cfg, method, **kwargs)


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **kwargs)
