import numpy as np
import pytest

from forml.data import Dataset
from forml.model import init_mlp


def fd_gradient(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` at every coordinate of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        g.flat[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_close(a, b, rtol, atol=1e-8):
    """Elementwise |a - b| <= rtol * max(|a|, |b|) + atol."""
    a, b = np.asarray(a), np.asarray(b)
    return np.all(np.abs(a - b) <= rtol * np.maximum(np.abs(a), np.abs(b)) + atol)


def random_batch(rng, n, d, num_classes, num_groups=2):
    return Dataset(rng.normal(size=(n, d)), rng.integers(0, num_classes, n),
                   rng.integers(0, num_groups, n), num_classes, num_groups)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    return init_mlp([4, 6, 5, 3], seed=3)
