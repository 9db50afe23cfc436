"""Reverse-mode gradients for the MLP family in :mod:`forml.model`.

Gradient vectors are flat float64 arrays in the canonical parameter layout
(see :mod:`forml.model`). Everything here is a pure function of its inputs.

The core object is a :class:`Tape`: the activations of one forward pass plus
the per-sample backpropagated signals for a chosen set of logit gradients.
Because backprop through a fixed ReLU pattern is linear in each row of the
logit gradient, a single tape yields every weighted combination of
per-sample gradients, the full per-sample gradient matrix, or per-sample
projections ``<g_i, v>`` without recomputing the forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ForMLError, NonFiniteError, ShapeError
from .model import LossKind, ModelParams, _check_inputs, _check_targets, log_softmax


@dataclass(frozen=True)
class Tape:
    params: ModelParams
    inputs: tuple  # input activation of every layer, each (n, in_k)
    masks: tuple  # ReLU derivative for every hidden layer, each (n, out_k)
    logits: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


def record(params: ModelParams, x) -> Tape:
    h = _check_inputs(params, x)
    inputs, masks = [], []
    last = len(params.layers) - 1
    for k, (W, b) in enumerate(params.layers):
        inputs.append(h)
        z = h @ W.T + b
        if k < last:
            mask = (z > 0).astype(np.float64)
            masks.append(mask)
            h = z * mask
        else:
            h = z
    return Tape(params, tuple(inputs), tuple(masks), h)


def ce_losses_and_dlogits(logits: np.ndarray, targets, step=None):
    """Per-sample CE losses and their gradients w.r.t. the logits.

    Fails fast on the first non-finite loss, naming its batch index.
    """
    t = _check_targets(logits, targets)
    logp = log_softmax(logits)
    rows = np.arange(len(t))
    losses = -logp[rows, t]
    bad = np.flatnonzero(~np.isfinite(losses))
    if bad.size:
        raise NonFiniteError("non-finite loss", index=int(bad[0]), step=step)
    dlogits = np.exp(logp)
    dlogits[rows, t] -= 1.0
    return losses, dlogits


def backprop(tape: Tape, dlogits: np.ndarray) -> list:
    """Per-sample gradient w.r.t. each layer's pre-activation output.

    Row ``i`` of the returned arrays is the signal that sample ``i`` alone
    sends back given logit gradient row ``dlogits[i]``.
    """
    layers = tape.params.layers
    delta = np.asarray(dlogits, dtype=np.float64)
    if delta.shape != tape.logits.shape:
        raise ShapeError(f"logit gradient {delta.shape} does not match logits {tape.logits.shape}")
    deltas = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        deltas[k] = delta
        if k > 0:
            delta = (delta @ layers[k][0]) * tape.masks[k - 1]
    return deltas


def weighted_sum(tape: Tape, deltas, weights) -> np.ndarray:
    """``sum_i weights[i] * g_i`` as a flat vector."""
    w = np.asarray(weights, dtype=np.float64)
    parts = []
    for a, d in zip(tape.inputs, deltas):
        wd = d * w[:, None]
        parts.append((wd.T @ a).ravel())
        parts.append(wd.sum(axis=0))
    return np.concatenate(parts)


def per_sample_matrix(tape: Tape, deltas) -> np.ndarray:
    """All per-sample gradients, shape ``(n, num_params)``."""
    parts = []
    for a, d in zip(tape.inputs, deltas):
        parts.append(np.einsum("no,ni->noi", d, a).reshape(len(d), -1))
        parts.append(d)
    return np.concatenate(parts, axis=1)


def per_sample_dots(tape: Tape, deltas, v) -> np.ndarray:
    """``<g_i, v>`` for every sample without materializing ``g_i``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (tape.params.num_params,):
        raise ShapeError(f"vector of shape {v.shape} for {tape.params.num_params} parameters")
    out = np.zeros(tape.batch_size)
    pos = 0
    for a, d, (W, _) in zip(tape.inputs, deltas, tape.params.layers):
        V = v[pos:pos + W.size].reshape(W.shape)
        pos += W.size
        vb = v[pos:pos + W.shape[0]]
        pos += W.shape[0]
        out += np.einsum("ni,ni->n", d @ V, a) + d @ vb
    return out


def _check_loss(loss):
    if loss is not LossKind.SOFTMAX_CE:
        raise ForMLError(f"unsupported loss {loss}")


def loss_gradient(params: ModelParams, x, y, loss: LossKind = LossKind.SOFTMAX_CE,
                  per_sample_weights=None) -> np.ndarray:
    """Gradient of the (weighted) mean loss over the batch.

    With ``per_sample_weights=None`` the weights are uniform ``1/n``;
    otherwise they must lie on the simplex (sum to 1 within 1e-9).
    """
    _check_loss(loss)
    tape = record(params, x)
    n = tape.batch_size
    if n == 0:
        raise ForMLError("empty batch")
    if per_sample_weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        weights = np.asarray(per_sample_weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ShapeError(f"{weights.shape} weights for a batch of {n}")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ForMLError(f"weights sum to {weights.sum()!r}, expected 1")
    _, dlogits = ce_losses_and_dlogits(tape.logits, y)
    return weighted_sum(tape, backprop(tape, dlogits), weights)


def per_sample_gradients(params: ModelParams, x, y, loss: LossKind = LossKind.SOFTMAX_CE) -> np.ndarray:
    """Unweighted per-sample gradients ``g_i``, one row per sample."""
    _check_loss(loss)
    tape = record(params, x)
    if tape.batch_size == 0:
        raise ForMLError("empty batch")
    _, dlogits = ce_losses_and_dlogits(tape.logits, y)
    return per_sample_matrix(tape, backprop(tape, dlogits))


def dot(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"cannot dot vectors of shape {a.shape} and {b.shape}")
    return float(a @ b)
