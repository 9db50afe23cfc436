"""Datasets, IDX ingestion, synthetic data, label corruption, splits and samplers."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ForMLError, IdxFormatError, SamplingError

IDX_IMAGES_MAGIC = 2051  # 0x00000803
IDX_LABELS_MAGIC = 2049  # 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Samples as parallel arrays: features ``x``, labels ``y``, groups ``a``.

    ``class_as_group`` marks datasets whose sensitive attribute is the (clean)
    class label, as for MNIST.
    """

    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    num_classes: int
    num_groups: int
    class_as_group: bool = False

    def __post_init__(self):
        n = len(self.x)
        if len(self.y) != n or len(self.a) != n:
            raise ForMLError(f"x/y/a lengths differ: {n}, {len(self.y)}, {len(self.a)}")
        if n and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ForMLError(f"labels outside [0, {self.num_classes})")
        if n and (self.a.min() < 0 or self.a.max() >= self.num_groups):
            raise ForMLError(f"groups outside [0, {self.num_groups})")

    def __len__(self):
        return len(self.y)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, x=self.x[idx], y=self.y[idx], a=self.a[idx])

    def strata(self, by: str) -> np.ndarray:
        if by == "class":
            return self.y
        if by == "group":
            return self.a
        raise ForMLError(f"unknown stratification key {by!r}")


@dataclass(frozen=True)
class Split:
    """Train and exemplar partitions of a source dataset.

    ``train_index`` / ``exemplar_index`` locate the partitions in the source.
    ``stratify`` names the key (``class`` or ``group``) that ``sample_fair``
    balances exemplar batches on.
    """

    train: Dataset
    exemplar: Dataset
    train_index: np.ndarray
    exemplar_index: np.ndarray
    stratify: str = "group"


# --- IDX ------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(path, expected_magic: int):
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxFormatError("file shorter than the magic number", path, len(raw))
    magic = struct.unpack_from(">i", raw, 0)[0]
    if magic != expected_magic:
        raise IdxFormatError(f"bad magic number {magic:#010x}, expected {expected_magic:#010x}", path, 0)
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"header needs {header} bytes, file has {len(raw)}", path, len(raw))
    dims = struct.unpack_from(f">{ndim}i", raw, 4)
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxFormatError(f"truncated payload: need {size} bytes after header, found {len(raw) - header}",
                             path, len(raw))
    if len(raw) - header > size:
        raise IdxFormatError(f"{len(raw) - header - size} trailing bytes after payload", path, header + size)
    data = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)
    return data


def read_idx_images(path) -> np.ndarray:
    return _parse_idx(path, IDX_IMAGES_MAGIC)


def read_idx_labels(path) -> np.ndarray:
    return _parse_idx(path, IDX_LABELS_MAGIC)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair. Pixels scaled to [0, 1]; ``a := y``."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"image file holds {images.shape[0]} items, label file {labels.shape[0]}",
                             labels_path, 4)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if y.size and y.max() >= num_classes:
        bad = int(np.argmax(y >= num_classes))
        raise IdxFormatError(f"label {y[bad]} outside [0, {num_classes})", labels_path, 8 + bad)
    return Dataset(x, y, y.copy(), num_classes, num_classes, class_as_group=True)


def write_idx(path, array: np.ndarray, magic: int) -> None:
    """Write a uint8 array as an IDX file (gzip if the name ends in .gz)."""
    arr = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">i", magic)
    # the low byte of the magic encodes the number of dimensions
    if arr.ndim != (magic & 0xFF):
        raise ForMLError(f"magic {magic:#x} implies {magic & 0xFF} dims, array has {arr.ndim}")
    header += struct.pack(f">{arr.ndim}i", *arr.shape)
    payload = header + arr.tobytes()
    if str(path).endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    Path(path).write_bytes(payload)


# --- synthetic data -------------------------------------------------------

def allocate_counts(total: int, proportions) -> np.ndarray:
    """Largest-remainder rounding: floors first, leftovers to the largest
    fractional parts (ties to the lower index)."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = p * total
    counts = np.floor(raw).astype(np.int64)
    leftover = total - counts.sum()
    order = np.lexsort((np.arange(len(p)), -(raw - counts)))
    counts[order[:leftover]] += 1
    return counts


def gen_synthetic(num_samples: int, num_classes: int, num_groups: int, group_proportions,
                  class_separation: float, seed: int, num_features: int = 2,
                  group_shift: float = 1.0, minority_noise: float = 1.5) -> Dataset:
    """Gaussian class clusters with group-dependent shifts.

    Class ``c`` is centred at ``class_separation * m_c`` for a random unit
    vector ``m_c``. Group 0 is sampled with unit noise at the class centres;
    every other group gets an extra per-(group, class) mean offset of norm
    ``group_shift`` and ``minority_noise`` times the noise, so that groups
    differ in how learnable they are. Group sizes follow
    :func:`allocate_counts`; classes are balanced within each group.
    """
    p = np.asarray(group_proportions, dtype=np.float64)
    if p.shape != (num_groups,) or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ForMLError(f"group proportions must be {num_groups} positive values summing to 1, got {list(p)}")
    if num_classes < 2 or num_samples < 1:
        raise ForMLError("need at least 2 classes and 1 sample")
    rng = np.random.default_rng(seed)
    centres = rng.normal(size=(num_classes, num_features))
    centres /= np.linalg.norm(centres, axis=1, keepdims=True)
    offsets = rng.normal(size=(num_groups, num_classes, num_features))
    offsets *= group_shift / np.linalg.norm(offsets, axis=2, keepdims=True)
    offsets[0] = 0.0

    group_counts = allocate_counts(num_samples, p)
    ys, gs = [], []
    for g, cnt in enumerate(group_counts):
        class_counts = allocate_counts(int(cnt), np.full(num_classes, 1.0 / num_classes))
        ys.append(np.repeat(np.arange(num_classes), class_counts))
        gs.append(np.full(int(cnt), g))
    y = np.concatenate(ys)
    a = np.concatenate(gs)
    order = rng.permutation(num_samples)
    y, a = y[order], a[order]
    noise = rng.normal(size=(num_samples, num_features))
    scale = np.where(a == 0, 1.0, minority_noise)[:, None]
    x = class_separation * centres[y] + offsets[a, y] + scale * noise
    return Dataset(x, y.astype(np.int64), a.astype(np.int64), num_classes, num_groups)


def save_csv(dataset: Dataset, path) -> None:
    d = dataset.x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"feature_{j}" for j in range(d)] + ["label", "group"])
        for xi, yi, ai in zip(dataset.x, dataset.y, dataset.a):
            writer.writerow([repr(float(v)) for v in xi] + [int(yi), int(ai)])


def load_csv(path, num_classes=None, num_groups=None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "group"]:
            raise ForMLError(f"{path}: last columns must be label, group; got {header[-2:]}")
        rows = list(reader)
    body = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    y = body[:, -2].astype(np.int64)
    a = body[:, -1].astype(np.int64)
    return Dataset(body[:, :-2], y, a,
                   num_classes or int(y.max()) + 1, num_groups or int(a.max()) + 1)


# --- corruption and splits ------------------------------------------------

def corrupt_labels(samples: Dataset, fraction: float, target_label: int, seed: int):
    """Relabel exactly ``round(fraction * N)`` uniformly chosen samples to
    ``target_label``. Already-matching samples may be chosen (a no-op that
    still counts). Groups are untouched. Returns ``(dataset, indices)``."""
    if not 0.0 <= fraction <= 1.0:
        raise ForMLError(f"fraction must be in [0, 1], got {fraction}")
    if not 0 <= target_label < samples.num_classes:
        raise ForMLError(f"target label {target_label} outside [0, {samples.num_classes})")
    n = len(samples)
    k = int(round(fraction * n))
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    y = samples.y.copy()
    y[chosen] = target_label
    return replace(samples, y=y), chosen


def stratified_pick(keys: np.ndarray, size: int, rng, strata=None) -> np.ndarray:
    """Draw ``size`` indices split evenly across strata; the remainder goes
    one each to the lowest stratum ids."""
    strata = np.unique(keys) if strata is None else np.asarray(strata)
    base, extra = divmod(size, len(strata))
    picked = []
    for k, s in enumerate(strata):
        want = base + (1 if k < extra else 0)
        members = np.flatnonzero(keys == s)
        if len(members) < want:
            raise SamplingError(f"stratum {int(s)} has {len(members)} samples, {want} requested")
        picked.append(rng.choice(members, size=want, replace=False))
    return np.sort(np.concatenate(picked))


def make_split(samples: Dataset, exemplar_size: int, stratify: str = "group", seed: int = 0) -> Split:
    """Hold out an exemplar set with equal per-stratum counts (remainder to
    the lowest stratum ids); the rest is the training set."""
    n = len(samples)
    if not 0 < exemplar_size < n:
        raise SamplingError(f"exemplar size {exemplar_size} must be in (0, {n})")
    rng = np.random.default_rng(seed)
    ex = stratified_pick(samples.strata(stratify), exemplar_size, rng)
    mask = np.ones(n, dtype=bool)
    mask[ex] = False
    tr = np.flatnonzero(mask)
    return Split(samples.subset(tr), samples.subset(ex), tr, ex, stratify)


# --- samplers -------------------------------------------------------------

def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def sample_uniform(split: Split, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Batch ``step`` of epoch-wise shuffled training indices.

    Each epoch is a fresh permutation seeded by ``(seed, epoch)`` cut into
    ``batch_size`` chunks; the last, partial chunk is kept.
    """
    n = len(split.train)
    if not 0 < batch_size <= n:
        raise SamplingError(f"batch size {batch_size} must be in (0, {n}]")
    per_epoch = batches_per_epoch(n, batch_size)
    epoch, b = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[b * batch_size:(b + 1) * batch_size]


def sample_fair(split: Split, batch_size: int, min_per_stratum: int, seed: int, step: int) -> np.ndarray:
    """Exemplar batch with at least ``min_per_stratum`` indices from every
    stratum; the rest is drawn uniformly (without replacement) from what is
    left of the exemplar pool."""
    keys = split.exemplar.strata(split.stratify)
    strata = np.unique(keys)
    n = len(keys)
    batch_size = min(batch_size, n)
    if batch_size < min_per_stratum * len(strata):
        raise SamplingError(f"batch of {batch_size} cannot hold {min_per_stratum} from each of {len(strata)} strata")
    rng = np.random.default_rng([seed, step, 1])
    chosen = []
    for s in strata:
        members = np.flatnonzero(keys == s)
        if len(members) < min_per_stratum:
            raise SamplingError(f"stratum {int(s)} has only {len(members)} exemplar samples")
        chosen.append(rng.choice(members, size=min_per_stratum, replace=False))
    chosen = np.concatenate(chosen).astype(np.int64)
    rest = np.setdiff1d(np.arange(n), chosen)
    fill = rng.choice(rest, size=batch_size - len(chosen), replace=False)
    return np.concatenate([chosen, fill])
