"""Export the 5,000-digit MNIST sample bundled with ``mlxtend`` as IDX files.

The full MNIST archive is not redistributable inside this package; this
gives a small real-digit stand-in with the same on-disk format. Requires the
optional ``mlxtend`` dependency.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, stratified_pick, write_idx

FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def export_mnist_sample(out_dir, test_size: int = 1000, seed: int = 0) -> dict:
    """Write class-stratified train/test IDX pairs; returns the file paths."""
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    images = x.reshape(-1, 28, 28).astype(np.uint8)
    labels = y.astype(np.uint8)
    test = stratified_pick(labels, test_size, np.random.default_rng(seed))
    train = np.setdiff1d(np.arange(len(labels)), test)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / v for k, v in FILES.items()}
    write_idx(paths["train_images"], images[train], IDX_IMAGES_MAGIC)
    write_idx(paths["train_labels"], labels[train], IDX_LABELS_MAGIC)
    write_idx(paths["test_images"], images[test], IDX_IMAGES_MAGIC)
    write_idx(paths["test_labels"], labels[test], IDX_LABELS_MAGIC)
    return {k: str(v) for k, v in paths.items()}


if __name__ == "__main__":
    import sys

    for k, v in export_mnist_sample(sys.argv[1] if len(sys.argv) > 1 else "data/mnist-sample").items():
        print(k, v)
