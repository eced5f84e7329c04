"""Memory-smoothed pseudo-labeling.

Pipeline for a batch of unlabeled weak views: predict, align the class
distribution, compute affinities against the memory bank, and blend the
prediction with the affinity-weighted bank probabilities. Confidence masking
only gates the classification loss; every pseudo-label feeds the graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, StateError
from .numerics import softmax

DA_FLOOR = 1e-6


def distribution_align(p, running_mean, floor: float = DA_FLOOR) -> np.ndarray:
    """Normalize(p / running_mean) along the last axis; the mean is floored first."""
    p = np.asarray(p, dtype=np.float64)
    ratio = p / np.maximum(np.asarray(running_mean, dtype=np.float64), floor)
    return ratio / ratio.sum(axis=-1, keepdims=True)


@dataclass
class DistributionAligner:
    """Running class marginal of unlabeled predictions.

    ``align`` uses the current mean, then folds the batch mean of the
    pre-alignment predictions into it.
    """

    n_classes: int
    rho: float = 0.99
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise InvalidArgumentError(f"DA momentum must lie in [0, 1), got {self.rho}")
        if self.running_mean is None:
            self.running_mean = np.full(self.n_classes, 1.0 / self.n_classes)

    def align(self, probs) -> np.ndarray:
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        out = distribution_align(probs, self.running_mean)
        self.running_mean = self.rho * self.running_mean + (1.0 - self.rho) * probs.mean(axis=0)
        return out


class MemoryBank:
    """FIFO store of weak-view (probability, embedding) pairs, oldest first."""

    def __init__(self, capacity: int, n_classes: int, embed_dim: int):
        if capacity < 1:
            raise InvalidArgumentError("memory bank capacity must be positive")
        self.capacity = capacity
        self.probs = np.empty((0, n_classes))
        self.embeds = np.empty((0, embed_dim))
        self.labeled = np.empty(0, dtype=bool)

    def __len__(self) -> int:
        return len(self.probs)

    def push(self, probs, embeds, labeled: bool | np.ndarray = False) -> "MemoryBank":
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        embeds = np.atleast_2d(np.asarray(embeds, dtype=np.float64))
        n = len(probs)
        if n == 0:
            return self
        if len(embeds) != n:
            raise InvalidArgumentError("probabilities and embeddings differ in count")
        flags = np.broadcast_to(np.asarray(labeled, dtype=bool), (n,))
        K = self.capacity
        self.probs = np.concatenate([self.probs, probs])[-K:]
        self.embeds = np.concatenate([self.embeds, embeds])[-K:]
        self.labeled = np.concatenate([self.labeled, flags])[-K:]
        return self


def affinity(z, bank_embeds, t: float) -> np.ndarray:
    """Softmax over bank entries of z . z_k / t, per query row."""
    bank_embeds = np.asarray(bank_embeds, dtype=np.float64)
    if len(bank_embeds) == 0:
        raise StateError("affinity needs a non-empty memory bank")
    z = np.asarray(z, dtype=np.float64)
    return softmax(z @ bank_embeds.T, temperature=t)


def smooth_pseudo_label(p, a, bank_probs, alpha: float) -> np.ndarray:
    """q = alpha * p + (1 - alpha) * sum_k a_k p_k."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must lie in [0, 1], got {alpha}")
    p = np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    bank_probs = np.asarray(bank_probs, dtype=np.float64)
    if a.shape[-1] != len(bank_probs):
        raise InvalidArgumentError(
            f"{a.shape[-1]} affinity weights for {len(bank_probs)} bank entries"
        )
    return alpha * p + (1.0 - alpha) * (a @ bank_probs)


def smoothness_objective(q, p, a, bank_probs, alpha: float) -> float:
    """J(q) = (1 - alpha) sum_k a_k ||q - p_k||^2 + alpha ||q - p||^2 for one sample."""
    q, p, a = (np.asarray(v, dtype=np.float64) for v in (q, p, a))
    diffs = q - np.asarray(bank_probs, dtype=np.float64)
    return float((1 - alpha) * np.sum(a * np.sum(diffs**2, axis=1)) + alpha * np.sum((q - p) ** 2))


def smoothness_objective_grad(q, p, a, bank_probs, alpha: float) -> np.ndarray:
    q, p, a = (np.asarray(v, dtype=np.float64) for v in (q, p, a))
    diffs = q - np.asarray(bank_probs, dtype=np.float64)
    return 2 * (1 - alpha) * (a @ diffs) + 2 * alpha * (q - p)


def confidence_mask(q, tau: float) -> np.ndarray | bool:
    """True where the largest class probability is at least ``tau``."""
    m = np.max(np.asarray(q, dtype=np.float64), axis=-1) >= tau
    return bool(m) if np.ndim(m) == 0 else m


def memory_smoothed_labels(p, z, bank: MemoryBank, alpha: float, t: float) -> np.ndarray:
    """Smoothed pseudo-labels for a batch; an empty bank leaves ``p`` as is."""
    if len(bank) == 0:
        return np.array(p, dtype=np.float64)
    return smooth_pseudo_label(p, affinity(z, bank.embeds, t), bank.probs, alpha)
