"""Multi-seed experiment orchestration and results aggregation.

An experiment is described by one JSON file (see README). Every
``(method, seed)`` pair is an independent run; seeds are
``base_seed + run_index``. Each run produces a :data:`ROW_FIELDS` row; the
summary holds per-method mean and standard error (sample std / sqrt(runs))
of every metric.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .condense import ARMS, CondensationConfig, run_condensation_pipeline
from .data import Dataset, corrupt_labels, gen_synthetic, load_idx, make_split, stratified_pick
from .errors import ForMLError
from .model import init_mlp, save_params
from .trainer import TrainConfig, evaluate, train
from .weights import EmaTracker, write_weights_csv

log = logging.getLogger(__name__)

EXPERIMENTS = ("corrupt_mnist", "synthetic_fairness", "condensation")
METHODS = ("uniform", "random", "proportional", "forml")
ROW_FIELDS = ("method", "seed", "tprd", "max_fnr", "accuracy", "ema_loss_ratio", "status")
METRICS = ("tprd", "max_fnr", "accuracy", "ema_loss_ratio")
HISTORY_FIELDS = ("epoch", "split", "accuracy", "tprd", "max_fnr", "meta_loss_value")


@dataclass
class ExperimentConfig:
    experiment: str
    data: dict
    methods: list = field(default_factory=lambda: ["uniform", "forml"])
    train: dict = field(default_factory=dict)
    method_overrides: dict = field(default_factory=dict)
    hidden: list = field(default_factory=lambda: [256, 256])
    num_seeds: int = 1
    base_seed: int = 0
    out_dir: str = "results"
    workers: int = 1
    condensation: dict = field(default_factory=dict)
    dump_weights: bool = True
    save_checkpoints: bool = False
    base_dir: str = "."  # resolves relative data paths; set from the config file location

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ForMLError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.num_seeds < 1:
            raise ForMLError("num_seeds must be >= 1")
        if self.experiment != "condensation":
            if not self.methods:
                raise ForMLError("method list is empty")
            unknown = set(self.methods) - set(METHODS)
            if unknown:
                raise ForMLError(f"unknown methods {sorted(unknown)}")

    @classmethod
    def from_json(cls, path, **overrides) -> "ExperimentConfig":
        path = Path(path)
        raw = json.loads(path.read_text())
        raw.setdefault("base_dir", str(path.parent))
        raw.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ForMLError(f"unknown config keys {sorted(extra)}")
        return cls(**raw)

    def train_config(self, method: str, seed: int) -> TrainConfig:
        kw = dict(self.train)
        kw.update(self.method_overrides.get(method, {}))
        kw["seed"] = seed
        return TrainConfig(**kw)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p


# --- data preparation -------------------------------------------------------

def _mnist_sets(cfg: ExperimentConfig, seed: int):
    d = cfg.data
    train_all = load_idx(cfg.path(d["train_images"]), cfg.path(d["train_labels"]))
    test = load_idx(cfg.path(d["test_images"]), cfg.path(d["test_labels"]))
    rng = np.random.default_rng([seed, 11])
    if d.get("subset"):
        train_all = train_all.subset(stratified_pick(train_all.a, int(d["subset"]), rng))
    if d.get("test_subset"):
        test = test.subset(stratified_pick(test.a, int(d["test_subset"]), rng))
    return train_all, test


def prepare_corrupt_mnist(cfg: ExperimentConfig, seed: int):
    """Returns ``(split, test, corrupted indices into split.train)``."""
    d = cfg.data
    train_all, test = _mnist_sets(cfg, seed)
    fraction = float(d.get("corrupt_fraction", 0.2))
    target = int(d.get("target_label", 2))
    exemplar_size = int(d.get("exemplar_size", 5000))
    stratify = d.get("stratify", "group")
    if d.get("split_before_corruption", False):
        split = make_split(train_all, exemplar_size, stratify, seed)
        corrupted_train, corrupted = corrupt_labels(split.train, fraction, target, seed)
        split = type(split)(corrupted_train, split.exemplar, split.train_index, split.exemplar_index, stratify)
    else:
        corrupted_all, corrupted_src = corrupt_labels(train_all, fraction, target, seed)
        split = make_split(corrupted_all, exemplar_size, stratify, seed)
        corrupted = np.flatnonzero(np.isin(split.train_index, corrupted_src))
    return split, test, corrupted


def synthetic_sets(data: dict, seed: int):
    n_train = int(data.get("num_train", 4000))
    n_test = int(data.get("num_test", 4000))
    full = gen_synthetic(
        n_train + n_test,
        int(data.get("num_classes", 2)),
        int(data.get("num_groups", 2)),
        data.get("group_proportions", [0.9, 0.1]),
        float(data.get("class_separation", 2.0)),
        seed,
        num_features=int(data.get("num_features", 2)),
        group_shift=float(data.get("group_shift", 1.0)),
        minority_noise=float(data.get("minority_noise", 1.5)),
    )
    return full.subset(np.arange(n_train)), full.subset(np.arange(n_train, n_train + n_test))


def prepare_synthetic(cfg: ExperimentConfig, seed: int):
    train_all, test = synthetic_sets(cfg.data, seed)
    split = make_split(train_all, int(cfg.data.get("exemplar_size", 400)), cfg.data.get("stratify", "group"), seed)
    return split, test


# --- analysis ---------------------------------------------------------------

def ema_loss_ratio(ema: EmaTracker, samples: Dataset, target_label: int) -> float:
    """Mean EMA over samples labelled ``target_label`` divided by the mean over the rest."""
    if len(ema) != len(samples):
        raise ForMLError(f"EMA covers {len(ema)} samples, dataset has {len(samples)}")
    hit = samples.y == target_label
    if not hit.any() or hit.all():
        raise ForMLError(f"label {target_label} partition is empty on one side")
    seen = ema.initialized
    num, den = ema.value[hit & seen], ema.value[~hit & seen]
    if num.size == 0 or den.size == 0:
        raise ForMLError("no EMA observations on one side of the partition")
    return float(num.mean() / den.mean())


def _stderr(values) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def aggregate(rows) -> list[dict]:
    """Per-method mean and standard error; failed rows and NaNs are skipped.

    Order-invariant: values are sorted before summation.
    """
    by_method = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        by_method.setdefault(r["method"], []).append(r)
    out = []
    for method in sorted(by_method):
        for metric in METRICS:
            vals = sorted(float(r[metric]) for r in by_method[method]
                          if r.get(metric) not in (None, "") and not math.isnan(float(r[metric])))
            if not vals:
                continue
            out.append({"method": method, "metric": metric,
                        "mean": math.fsum(vals) / len(vals), "stderr": _stderr(vals), "runs": len(vals)})
    return out


# --- CSV --------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{float(v):.6f}"
    return str(v)


def to_csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _weights_text(store, ema) -> str:
    buf = io.StringIO()
    write_weights_csv(buf, store, ema)
    return buf.getvalue()


# --- runs -------------------------------------------------------------------

def _row(method, seed, metrics=None, ratio=None, status="ok") -> dict:
    metrics = metrics or {}
    nan = float("nan")
    return {"method": method, "seed": seed, "tprd": metrics.get("tprd", nan),
            "max_fnr": metrics.get("max_fnr", nan), "accuracy": metrics.get("accuracy", nan),
            "ema_loss_ratio": ratio, "status": status}


def run_one(cfg: ExperimentConfig, method: str, seed: int):
    """A single training run. Returns ``(rows, artifacts)`` where artifacts
    maps output file names to their content (str or bytes)."""
    if cfg.experiment == "condensation":
        return _run_condensation(cfg, seed)
    if cfg.experiment == "corrupt_mnist":
        split, test, _ = prepare_corrupt_mnist(cfg, seed)
    else:
        split, test = prepare_synthetic(cfg, seed)
    tcfg = cfg.train_config(method, seed)
    dims = [split.train.x.shape[1], *cfg.hidden, split.train.num_classes]
    result = train(method, split, init_mlp(dims, seed), tcfg, eval_sets={"test": test})
    metrics = evaluate(result.params, test, tcfg)
    ratio = None
    if cfg.experiment == "corrupt_mnist":
        ratio = ema_loss_ratio(result.ema, split.train, int(cfg.data.get("target_label", 2)))
    artifacts = {f"history_{method}_{seed}.csv": to_csv(result.history, HISTORY_FIELDS)}
    if cfg.dump_weights:
        artifacts[f"weights_{method}_{seed}.csv"] = _weights_text(result.store, result.ema)
    if cfg.save_checkpoints:
        artifacts[f"params_{method}_{seed}.bin"] = result.params
    return [_row(method, seed, metrics, ratio)], artifacts


def _run_condensation(cfg: ExperimentConfig, seed: int):
    c = dict(cfg.condensation)
    source = cfg.data.get("source", "synthetic")
    if source == "synthetic":
        train_data, test = synthetic_sets(cfg.data, seed)
    elif source == "mnist":
        train_data, test = _mnist_sets(cfg, seed)
        if cfg.data.get("corrupt_fraction"):
            train_data, _ = corrupt_labels(train_data, float(cfg.data["corrupt_fraction"]),
                                           int(cfg.data.get("target_label", 2)), seed)
    else:
        raise ForMLError(f"unknown condensation data source {source!r}")
    ccfg = CondensationConfig(train=cfg.train_config("forml", seed), hidden=tuple(cfg.hidden),
                              exemplar_size=int(c.get("exemplar_size", 1000)),
                              fraction=float(c.get("fraction", 0.1)),
                              forgetting_epochs=c.get("forgetting_epochs"), seed=seed)
    report = run_condensation_pipeline(train_data, test, ccfg)
    rows = [_row(arm, seed, report["rows"][arm]) for arm in ARMS]
    artifacts = {}
    if cfg.dump_weights:
        artifacts[f"weights_forml_{seed}.csv"] = _weights_text(report["store"], report["ema"])
    return rows, artifacts


def _safe_run(args):
    cfg, method, seed = args
    try:
        return run_one(cfg, method, seed)
    except Exception as exc:  # record-and-continue: one blow-up must not sink the sweep
        log.exception("run %s/%d failed", method, seed)
        methods = ARMS if cfg.experiment == "condensation" else (method,)
        return [_row(m, seed, status=f"failed: {type(exc).__name__}: {exc}") for m in methods], {}


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Run every (method, seed) pair, write outputs, return ``(rows, summary)``."""
    out = Path(out_dir or cfg.path(cfg.out_dir))
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.base_seed + i for i in range(cfg.num_seeds)]
    methods = ["condensation"] if cfg.experiment == "condensation" else list(cfg.methods)
    jobs = [(cfg, m, s) for m in methods for s in seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_safe_run, jobs))
    else:
        results = [_safe_run(j) for j in jobs]

    rows = []
    for run_rows, artifacts in results:
        rows.extend(run_rows)
        for name, content in artifacts.items():
            if isinstance(content, str):
                (out / name).write_text(content)
            else:
                save_params(content, out / name)
    summary = aggregate(rows)
    (out / "rows.csv").write_text(to_csv(rows, ROW_FIELDS))
    (out / "summary.csv").write_text(to_csv(summary, ("method", "metric", "mean", "stderr", "runs")))
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return rows, summary


def report(in_dir) -> list[dict]:
    """Re-aggregate an existing ``rows.csv`` into ``summary.csv``."""
    in_dir = Path(in_dir)
    rows = read_rows(in_dir / "rows.csv")
    summary = aggregate(rows)
    (in_dir / "summary.csv").write_text(to_csv(summary, ("method", "metric", "mean", "stderr", "runs")))
    return summary


def failed(rows) -> bool:
    return any(r.get("status", "ok") != "ok" for r in rows)
