"""Learning per-sample training weights for group fairness via a meta-gradient."""

from .condense import condense, run_condensation_pipeline
from .data import Dataset, Split, corrupt_labels, gen_synthetic, load_idx, make_split, sample_fair, sample_uniform
from .fairness import FairLossKind, accuracy, fair_loss, group_confusion, max_fnr, tprd
from .model import LossKind, ModelParams, forward, init_mlp, per_sample_loss, sgd_step
from .trainer import TrainConfig, evaluate, forml_step, train, train_baseline, train_forml
from .weights import EmaTracker, WeightStore, WeightStrategy, batch_softmax

__version__ = "0.1.0"
