"""Synthetic datasets, label splitting, feature-space augmentations and batching."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import InvalidArgumentError, ParseError

UNLABELED = -1


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    # Ground truth for unlabeled rows; only metrics may read it.
    hidden_labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise InvalidArgumentError("features must be (N, d) with one label per row")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        known = self.labels if self.hidden_labels is None else self.hidden_labels
        return int(known.max()) + 1 if len(known) else 0


def generate_two_moons(n: int, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Two interleaving unit half-circles, n/2 points each.

    Class 0 lies on the upper arc centred at (0, 0); class 1 on the lower arc
    centred at (1, 0.5).
    """
    if n <= 0 or n % 2:
        raise InvalidArgumentError(f"two-moons needs a positive even n, got {n}")
    rng = np.random.default_rng(seed)
    half = n // 2
    theta0 = rng.uniform(0.0, np.pi, half)
    theta1 = rng.uniform(0.0, np.pi, half)
    upper = np.column_stack([np.cos(theta0), np.sin(theta0)])
    lower = np.column_stack([1.0 - np.cos(theta1), 0.5 - np.sin(theta1)])
    X = np.concatenate([upper, lower])
    if noise > 0:
        X = X + rng.normal(0.0, noise, X.shape)
    y = np.repeat([0, 1], half)
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm])


def generate_blobs(n: int, centers, sigma: float = 0.1, seed: int = 0) -> Dataset:
    """Isotropic Gaussian clusters, n / C points around each centre."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    C = len(centers)
    if len(np.unique(centers, axis=0)) != C:
        raise InvalidArgumentError("blob centres must be pairwise distinct")
    if n % C:
        raise InvalidArgumentError(f"n={n} is not divisible by {C} classes")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(C), n // C)
    X = centers[y] + sigma * rng.standard_normal((n, centers.shape[1]))
    perm = rng.permutation(n)
    return Dataset(X[perm], y[perm])


def split_labels(ds: Dataset, per_class: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Class-balanced labeled subset plus the remaining rows as unlabeled."""
    rng = np.random.default_rng(seed)
    C = ds.n_classes
    chosen = []
    for c in range(C):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < per_class:
            raise InvalidArgumentError(
                f"class {c} has {len(idx)} samples, cannot label {per_class}"
            )
        chosen.append(rng.choice(idx, size=per_class, replace=False))
    lab_idx = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
    rest = np.setdiff1d(np.arange(len(ds)), lab_idx)
    labeled = Dataset(ds.features[lab_idx], ds.labels[lab_idx], ds.split)
    unlabeled = Dataset(
        ds.features[rest],
        np.full(len(rest), UNLABELED),
        ds.split,
        hidden_labels=ds.labels[rest].copy(),
    )
    return labeled, unlabeled


@dataclass(frozen=True)
class AugmentPolicy:
    sigma_weak: float = 0.05
    sigma_strong: float = 0.15
    mask_prob: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.mask_prob < 1.0:
            raise InvalidArgumentError("mask probability must lie in [0, 1)")
        if self.sigma_weak < 0 or self.sigma_strong < 0:
            raise InvalidArgumentError("noise scales must be nonnegative")


def weak_augment(x, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x + policy.sigma_weak * rng.standard_normal(x.shape)


def strong_augment(x, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Zero each feature with probability ``mask_prob``, then add larger jitter."""
    x = np.asarray(x, dtype=np.float64)
    keep = rng.random(x.shape) >= policy.mask_prob
    return x * keep + policy.sigma_strong * rng.standard_normal(x.shape)


class BatchSampler:
    """Infinite stream of (labeled indices, unlabeled indices).

    Labeled rows are drawn with replacement. Unlabeled rows are cut from a
    stream of back-to-back random permutations, so each consecutive run of
    ``n_unlabeled`` drawn indices covers every unlabeled row exactly once.
    """

    def __init__(self, n_labeled: int, n_unlabeled: int, B: int, mu: int, seed: int = 0):
        if n_labeled < 1:
            raise InvalidArgumentError("labeled set is empty")
        if B < 1 or mu < 1:
            raise InvalidArgumentError("B and mu must be positive")
        if n_unlabeled < mu * B:
            raise InvalidArgumentError(
                f"{n_unlabeled} unlabeled samples cannot fill a batch of {mu * B}"
            )
        self.n_labeled, self.n_unlabeled = n_labeled, n_unlabeled
        self.B, self.ub = B, mu * B
        self.rng = np.random.default_rng(seed)
        self._pending = np.empty(0, dtype=np.int64)

    @property
    def batches_per_epoch(self) -> int:
        return -(-self.n_unlabeled // self.ub)

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        lab = self.rng.integers(0, self.n_labeled, size=self.B)
        while len(self._pending) < self.ub:
            self._pending = np.concatenate([self._pending, self.rng.permutation(self.n_unlabeled)])
        unl, self._pending = self._pending[: self.ub], self._pending[self.ub :]
        return lab, unl

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        while True:
            yield self.next()

    def get_state(self) -> dict:
        return {"rng": self.rng.bit_generator.state, "pending": self._pending.tolist()}

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state["rng"]
        self._pending = np.asarray(state["pending"], dtype=np.int64)


def write_dataset_csv(ds: Dataset, path: str | Path) -> None:
    d = ds.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(d)] + ["label"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([f"{v:.17g}" for v in x] + [int(y)])


def read_dataset_csv(path: str | Path, split: str = "train") -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty file", line=1)
    header = rows[0]
    if not header or header[-1] != "label":
        raise ParseError("header must end with a 'label' column", line=1)
    width = len(header)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ParseError(f"expected {width} columns, found {len(row)}", line=lineno)
        try:
            feats.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if labels[-1] < UNLABELED:
            raise ParseError(f"invalid label {labels[-1]}", line=lineno)
    X = np.asarray(feats, dtype=np.float64).reshape(len(feats), width - 1)
    return Dataset(X, np.asarray(labels, dtype=np.int64), split)
