"""Feed-forward ReLU classifier, softmax cross-entropy and SGD updates.

Parameters are immutable values: every update returns a new ``ModelParams``.

Canonical flat layout (used by every gradient vector in the package):
layer-major; within a layer the weight matrix (``out x in``, row-major)
comes first, followed by the bias vector.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ForMLError, ShapeError

CHECKPOINT_MAGIC = b"FMLP"
CHECKPOINT_VERSION = 1


class LossKind(enum.Enum):
    SOFTMAX_CE = "softmax_ce"


@dataclass(frozen=True)
class ModelParams:
    """MLP parameters. ``layers[k] = (W, b)`` with ``W.shape == (out, in)``."""

    layers: tuple

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        layers = []
        prev_out = None
        for k, (W, b) in enumerate(self.layers):
            W = np.array(W, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {k}: weight {W.shape} and bias {b.shape} do not match")
            if prev_out is not None and W.shape[1] != prev_out:
                raise ShapeError(f"layer {k} expects {W.shape[1]} inputs, previous layer emits {prev_out}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ForMLError(f"layer {k} has non-finite entries")
            W.setflags(write=False)
            b.setflags(write=False)
            layers.append((W, b))
            prev_out = W.shape[0]
        object.__setattr__(self, "layers", tuple(layers))

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[1]] + [W.shape[0] for W, _ in self.layers]

    @property
    def num_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in self.layers])

    def unflatten(self, flat) -> "ModelParams":
        """Build parameters with this architecture from a flat vector."""
        return ModelParams(_split_flat(np.asarray(flat, dtype=np.float64), self.dims))


def _split_flat(flat: np.ndarray, dims: Sequence[int]) -> tuple:
    expected = count_params(dims)
    if flat.shape != (expected,):
        raise ShapeError(f"flat vector has shape {flat.shape}, architecture needs ({expected},)")
    layers = []
    pos = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = flat[pos:pos + fan_out * fan_in].reshape(fan_out, fan_in)
        pos += fan_out * fan_in
        b = flat[pos:pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return tuple(layers)


def count_params(dims: Sequence[int]) -> int:
    return sum(o * i + o for i, o in zip(dims[:-1], dims[1:]))


def init_mlp(layer_dims: Sequence[int], seed: int) -> ModelParams:
    """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ForMLError(f"need at least input and output dims, got {list(layer_dims)}")
    if any(d <= 0 for d in dims):
        raise ForMLError(f"layer dims must be positive, got {list(layer_dims)}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    return ModelParams(tuple(layers))


def _check_inputs(params: ModelParams, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise ShapeError(f"inputs of shape {x.shape} do not match input layer width {params.dims[0]}")
    return x


def forward(params: ModelParams, inputs) -> np.ndarray:
    """Logits for a batch of feature vectors, shape ``(n, output_dim)``."""
    h = _check_inputs(params, inputs)
    last = len(params.layers) - 1
    for k, (W, b) in enumerate(params.layers):
        h = h @ W.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_targets(logits: np.ndarray, targets) -> np.ndarray:
    t = np.asarray(targets)
    if t.shape != (logits.shape[0],):
        raise ShapeError(f"{t.shape[0] if t.ndim else 0} targets for {logits.shape[0]} logit rows")
    t = t.astype(np.int64)
    bad = np.flatnonzero((t < 0) | (t >= logits.shape[1]))
    if bad.size:
        raise ForMLError(f"target {t[bad[0]]} at index {bad[0]} outside [0, {logits.shape[1]})")
    return t


def per_sample_loss(logits, targets, loss: LossKind = LossKind.SOFTMAX_CE) -> np.ndarray:
    """Per-sample natural-log softmax cross-entropy."""
    if loss is not LossKind.SOFTMAX_CE:
        raise ForMLError(f"unsupported loss {loss}")
    z = np.asarray(logits, dtype=np.float64)
    t = _check_targets(z, targets)
    return -log_softmax(z)[np.arange(len(t)), t]


def predict(params: ModelParams, inputs) -> np.ndarray:
    return forward(params, inputs).argmax(axis=1)


def sgd_step(params: ModelParams, grad, lr: float) -> ModelParams:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.num_params,):
        raise ShapeError(f"gradient of shape {grad.shape} for {params.num_params} parameters")
    return params.unflatten(params.flatten() - lr * grad)


# Checkpoint layout, all little-endian:
#   4 bytes   magic "FMLP"
#   uint32    format version (1)
#   uint32    number of layer dims L+1
#   uint32[]  layer dims (input, hidden..., output)
#   float64[] parameters in canonical flat layout
def save_params(params: ModelParams, path) -> None:
    dims = params.dims
    header = CHECKPOINT_MAGIC + struct.pack(f"<II{len(dims)}I", CHECKPOINT_VERSION, len(dims), *dims)
    Path(path).write_bytes(header + params.flatten().astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ForMLError(f"{path}: not a parameter checkpoint")
    version, ndims = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ForMLError(f"{path}: unsupported checkpoint version {version}")
    dims = list(struct.unpack_from(f"<{ndims}I", raw, 12))
    offset = 12 + 4 * ndims
    flat = np.frombuffer(raw, dtype="<f8", offset=offset).astype(np.float64)
    if flat.size != count_params(dims):
        raise ForMLError(f"{path}: payload holds {flat.size} values, dims {dims} need {count_params(dims)}")
    return ModelParams(_split_flat(flat, dims))
