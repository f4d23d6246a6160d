"""Datasets, client partitions and ratio-restricted active views."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._util import TAG_PARTITION, TAG_PERMUTE, ceil_fraction, stream
from .errors import ConfigError, DataError, InputError, ParseError
from .nn import Example


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        y = np.array(self.y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
            raise DataError(f"features must be a nonempty (n, d) array, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DataError(f"labels shape {y.shape} does not match {X.shape[0]} rows")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    def __len__(self):
        return len(self.y)

    def __getitem__(self, i) -> Example:
        return Example(self.X[i], int(self.y[i]))

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def examples(self) -> list[Example]:
        return [self[i] for i in range(len(self))]

    def take(self, indices) -> tuple[np.ndarray, np.ndarray]:
        indices = np.asarray(indices, dtype=np.int64)
        return self.X[indices], self.y[indices]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)


def _balanced_counts(n: int, C: int) -> list[int]:
    return [n // C + (c < n % C) for c in range(C)]


def _sample_mixture(means, n, spread, rng) -> tuple[np.ndarray, np.ndarray]:
    C, d = means.shape
    y = np.repeat(np.arange(C), _balanced_counts(n, C))
    y = y[rng.permutation(n)]
    X = means[y] + spread * rng.standard_normal((n, d))
    return X, y


def _check_synthetic(C, d, n, spread):
    if C < 2:
        raise ConfigError(f"need at least 2 classes, got {C}")
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}")
    if n < C:
        raise ConfigError(f"sample count {n} is smaller than class count {C}")
    if not spread > 0:
        raise ConfigError(f"spread must be positive, got {spread}")


def generate_synthetic(num_classes: int, dim: int, n: int, spread: float, seed: int,
                       mean_scale: float | None = None) -> Dataset:
    """Class-balanced Gaussian mixture.

    Class means are drawn once as ``mean_scale`` times a standard normal
    vector (default scale ``1/sqrt(dim)``, so means have roughly unit norm
    whatever the dimension); each example is its class mean plus ``spread``
    times standard normal noise.  Rows are in a seeded random order and
    per-class counts differ by at most one.
    """
    return generate_synthetic_split(num_classes, dim, n, 0, spread, seed, mean_scale)[0]


def generate_synthetic_split(num_classes: int, dim: int, n_train: int, n_test: int,
                             spread: float, seed: int, mean_scale: float | None = None
                             ) -> tuple[Dataset, Dataset | None]:
    """Train and test sets from the same mixture.

    The train set equals ``generate_synthetic(num_classes, dim, n_train, spread, seed)``;
    the test set continues the same random stream.
    """
    _check_synthetic(num_classes, dim, n_train, spread)
    if mean_scale is None:
        mean_scale = 1.0 / math.sqrt(dim)
    if not mean_scale > 0:
        raise ConfigError(f"mean_scale must be positive, got {mean_scale}")
    rng = np.random.default_rng(seed)
    means = mean_scale * rng.standard_normal((num_classes, dim))
    train = Dataset(*_sample_mixture(means, n_train, spread, rng), num_classes)
    if n_test <= 0:
        return train, None
    if n_test < num_classes:
        raise ConfigError(f"test sample count {n_test} is smaller than class count {num_classes}")
    return train, Dataset(*_sample_mixture(means, n_test, spread, rng), num_classes)


def load_dataset(path, num_classes: int | None = None) -> Dataset:
    """Read ``label,f0,f1,...`` rows (no header).

    The class count is ``max label + 1`` unless ``num_classes`` is given;
    classes without examples only produce a warning.
    """
    path = Path(path)
    X, y = [], []
    dim = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                raise ParseError(path, lineno, "empty line")
            if len(row) < 2:
                raise ParseError(path, lineno, "expected a label and at least one feature")
            try:
                label = int(row[0])
            except ValueError:
                raise ParseError(path, lineno, f"label {row[0]!r} is not an integer") from None
            if label < 0:
                raise ParseError(path, lineno, f"negative label {label}")
            try:
                feats = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(path, lineno, f"bad feature value ({exc})") from None
            if not all(math.isfinite(v) for v in feats):
                raise ParseError(path, lineno, "non-finite feature value")
            if dim is None:
                dim = len(feats)
            elif len(feats) != dim:
                raise ParseError(path, lineno, f"expected {dim} features, got {len(feats)}")
            X.append(feats)
            y.append(label)
    if not y:
        raise ParseError(path, 1, "file contains no examples")
    C = max(y) + 1
    if num_classes is not None:
        if num_classes < C:
            raise DataError(f"{path}: label {C - 1} exceeds declared class count {num_classes}")
        C = num_classes
    counts = np.bincount(y, minlength=C)
    empty = [c for c in range(C) if counts[c] == 0]
    if empty:
        warnings.warn(f"{path}: classes {empty} have no examples", stacklevel=2)
    return Dataset(np.array(X), np.array(y), C)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for x, label in zip(dataset.X, dataset.y):
            fh.write(",".join([str(int(label)), *(format(v, ".17g") for v in x)]) + "\n")


@dataclass(frozen=True, eq=False)
class ClientPartition:
    """One client's slice of a dataset.

    ``permuted`` is a fixed seeded ordering of ``indices``; ratio views take
    prefixes of it, so smaller ratios always see a subset of larger ones.
    """
    client_id: int
    indices: np.ndarray
    permuted: np.ndarray

    @classmethod
    def create(cls, client_id: int, indices, seed: int) -> "ClientPartition":
        indices = np.array(indices, dtype=np.int64)
        if len(np.unique(indices)) != len(indices):
            raise InputError(f"client {client_id}: duplicate indices")
        permuted = indices[stream(seed, TAG_PERMUTE, client_id).permutation(len(indices))]
        indices.setflags(write=False)
        permuted.setflags(write=False)
        return cls(int(client_id), indices, permuted)

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class ActiveView:
    partition: ClientPartition
    ratio: float

    @property
    def indices(self) -> np.ndarray:
        return self.partition.permuted[:ceil_fraction(self.ratio, len(self.partition))]

    @property
    def client_id(self) -> int:
        return self.partition.client_id

    def __len__(self):
        return ceil_fraction(self.ratio, len(self.partition))


def subset_ratio(partition: ClientPartition, ratio: float) -> ActiveView:
    if not 0 < ratio <= 1:
        raise ConfigError(f"ratio must lie in (0, 1], got {ratio}")
    return ActiveView(partition, float(ratio))


def partition_iid(dataset: Dataset | int, n_clients: int, seed: int) -> list[ClientPartition]:
    """Even random split. The first ``n % N`` clients get one extra example."""
    n = dataset if isinstance(dataset, int) else len(dataset)
    if n_clients < 1 or n_clients > n:
        raise ConfigError(f"cannot split {n} examples across {n_clients} clients")
    order = stream(seed, TAG_PARTITION).permutation(n)
    sizes = _balanced_counts(n, n_clients)
    bounds = np.cumsum([0, *sizes])
    return [ClientPartition.create(j, order[bounds[j]:bounds[j + 1]], seed)
            for j in range(n_clients)]


def parts_per_class(num_classes: int, n_clients: int, shards_per_client: int) -> int:
    return math.ceil(shards_per_client * n_clients / num_classes)


def partition_noniid_shards(dataset: Dataset, n_clients: int, shards_per_client: int,
                            seed: int) -> list[ClientPartition]:
    """Label-shard split: every client holds ``shards_per_client`` parts of distinct classes.

    Each class is shuffled and cut into ``P = ceil(s * N / C)`` nearly equal
    parts.  Parts are laid out class by class (class order and part order
    shuffled) and dealt column-wise, client ``j`` taking slots ``j, j+N, ...``.
    Since ``P <= N`` whenever ``s <= C``, no client can receive two parts of
    the same class.
    """
    C, N, s = dataset.num_classes, n_clients, shards_per_client
    if N < 1:
        raise ConfigError(f"need at least one client, got {N}")
    if not 1 <= s <= C:
        raise ConfigError(f"shards_per_client must lie in [1, {C}], got {s}")
    P = parts_per_class(C, N, s)
    counts = dataset.class_counts()
    short = {c: P - int(counts[c]) for c in range(C) if counts[c] < P}
    if short:
        detail = ", ".join(f"class {c} short by {k}" for c, k in short.items())
        raise ConfigError(f"cannot cut every class into {P} nonempty parts: {detail}")

    rng = stream(seed, TAG_PARTITION)
    slots = []
    for c in rng.permutation(C):
        members = np.flatnonzero(dataset.y == c)
        members = members[rng.permutation(len(members))]
        parts = np.array_split(members, P)
        slots.extend((int(c), parts[k]) for k in rng.permutation(P))
    slots = slots[:s * N]
    client_of_column = rng.permutation(N)

    owned = [[] for _ in range(N)]
    for pos, (_, part) in enumerate(slots):
        owned[client_of_column[pos % N]].append(part)
    return [ClientPartition.create(j, np.sort(np.concatenate(owned[j])), seed) for j in range(N)]


def client_labels(dataset: Dataset, partition: ClientPartition) -> set[int]:
    return set(np.unique(dataset.y[partition.indices]).tolist())
