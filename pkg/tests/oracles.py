"""Independent reference computations for the joint weight update.

These rebuild the look-ahead parameters from public gradient utilities and
differentiate the exemplar fairness loss numerically, so they share no code
with the closed-form meta-gradient in the trainer.
"""
import numpy as np

from forml.fairness import fair_loss
from forml.grad import loss_gradient
from forml.model import ModelParams, forward, per_sample_loss
from forml.weights import WeightStrategy


def softmax(w):
    e = np.exp(np.asarray(w) - np.max(w))
    return e / e.sum()


def scaled_logit_gradient(params, x, y, c):
    """Gradient of CE(c * z(x)) w.r.t. params for one sample.

    Scaling logits by ``c`` equals scaling the last layer by ``c``; the
    chain rule then multiplies that layer's gradient by ``c``.
    """
    layers = [(W.copy(), b.copy()) for W, b in params.layers]
    layers[-1] = (layers[-1][0] * c, layers[-1][1] * c)
    scaled = ModelParams(tuple(layers))
    g = loss_gradient(scaled, x[None, :], np.array([y]))
    last = params.layers[-1][0].size + params.layers[-1][1].size
    g[-last:] *= c
    return g


def train_gradient(params, batch, s, strategy):
    if strategy is WeightStrategy.LOSS:
        return loss_gradient(params, batch.x, batch.y, per_sample_weights=s)
    n = len(batch)
    return sum(scaled_logit_gradient(params, batch.x[i], batch.y[i], n * s[i]) for i in range(n)) / n


def lookahead_fair_loss(params, w, batch, exemplar, cfg):
    s = softmax(w)
    sign = -1.0 if cfg.reverse_model_update else 1.0
    g = train_gradient(params, batch, s, cfg.weight_strategy)
    tilde = params.unflatten(params.flatten() - sign * cfg.lr_model * g)
    losses = per_sample_loss(forward(tilde, exemplar.x), exemplar.y)
    return fair_loss(losses, exemplar.a, cfg.meta_loss)[0]


def fd_meta_gradient(params, w, batch, exemplar, cfg, h=1e-5):
    """Central differences of the exemplar fairness loss w.r.t. batch weights,
    sign-flipped when the weight update is reversed."""
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        out[k] = (lookahead_fair_loss(params, w + e, batch, exemplar, cfg)
                  - lookahead_fair_loss(params, w - e, batch, exemplar, cfg)) / (2 * h)
    return -out if cfg.reverse_weight_update else out
