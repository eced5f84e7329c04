"""Pseudo-label graph, embedding graph and the graph contrastive loss.

Batch mode builds square graphs over the unlabeled batch. Queue mode builds
(batch x queue) graphs against a FIFO of EMA pseudo-labels and EMA
strong-view embeddings; the current batch is pushed before the graphs are
built, and each batch row's own queue slot acts as its self-loop.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, StateError
from .numerics import row_normalize


def _threshold(sim: np.ndarray, T: float) -> np.ndarray:
    return np.where(sim >= T, sim, 0.0)


def build_pseudo_label_graph(q, T: float) -> np.ndarray:
    """W^q: 1 on the diagonal, q_b . q_j off it when that reaches ``T``, else 0."""
    if not 0.0 <= T <= 1.0:
        raise InvalidArgumentError(f"graph threshold must lie in [0, 1], got {T}")
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    W = _threshold(q @ q.T, T)
    np.fill_diagonal(W, 1.0)
    return W


def embedding_similarity(z, z_prime) -> np.ndarray:
    """Dot products z_b . z_j with z_b . z'_b on the diagonal."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    z_prime = np.atleast_2d(np.asarray(z_prime, dtype=np.float64))
    if z.shape != z_prime.shape:
        raise InvalidArgumentError("the two strong views must have the same shape")
    S = z @ z.T
    np.fill_diagonal(S, np.sum(z * z_prime, axis=1))
    return S


def build_embedding_graph(z, z_prime, t: float) -> np.ndarray:
    if t <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {t}")
    return np.exp(embedding_similarity(z, z_prime) / t)


class MomentumQueue:
    """FIFO of (EMA pseudo-label, EMA strong-view embedding) for unlabeled samples.

    ``batch_positions`` holds the slot index of each sample of the most recent
    push, or -1 for samples that were evicted within that same push.
    """

    def __init__(self, capacity: int, n_classes: int, embed_dim: int):
        if capacity < 1:
            raise InvalidArgumentError("queue capacity must be positive")
        self.capacity = capacity
        self.probs = np.empty((0, n_classes))
        self.embeds = np.empty((0, embed_dim))
        self.batch_positions = np.empty(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.probs)

    def push(self, probs, embeds) -> "MomentumQueue":
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        embeds = np.atleast_2d(np.asarray(embeds, dtype=np.float64))
        n = len(probs)
        if n == 0:
            return self
        if len(embeds) != n:
            raise InvalidArgumentError("pseudo-labels and embeddings differ in count")
        all_p = np.concatenate([self.probs, probs])
        all_z = np.concatenate([self.embeds, embeds])
        dropped = max(0, len(all_p) - self.capacity)
        self.probs, self.embeds = all_p[dropped:], all_z[dropped:]
        pos = np.arange(len(all_p) - n, len(all_p)) - dropped
        self.batch_positions = np.where(pos >= 0, pos, -1)
        return self


def build_queue_pseudo_label_graph(q_batch, queue: MomentumQueue, T: float) -> np.ndarray:
    """W^q against the queue: q_b . q_j thresholded at T, 1 at b's own slot."""
    q_batch = np.atleast_2d(np.asarray(q_batch, dtype=np.float64))
    pos = queue.batch_positions
    if len(pos) != len(q_batch) or np.any(pos < 0):
        raise StateError("current batch is not fully present in the momentum queue")
    if not 0.0 <= T <= 1.0:
        raise InvalidArgumentError(f"graph threshold must lie in [0, 1], got {T}")
    Wq = _threshold(q_batch @ queue.probs.T, T)
    Wq[np.arange(len(q_batch)), pos] = 1.0
    return Wq


def build_graphs_queue_mode(q_batch, z_batch, queue: MomentumQueue, T: float, t: float):
    """(W^q, W^z), each of shape (batch, len(queue)).

    W^z_bj = exp(z_b . zbar_j / t); at the own slot zbar is the EMA embedding
    of b's second strong view, so that entry is the positive pair.
    """
    if t <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {t}")
    Wq = build_queue_pseudo_label_graph(q_batch, queue, T)
    z_batch = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    return Wq, np.exp(z_batch @ queue.embeds.T / t)


def contrastive_loss(Wq, Wz) -> float:
    """Mean over rows of H(row-normalized W^q, row-normalized W^z)."""
    Wq = np.asarray(Wq, dtype=np.float64)
    Wz = np.asarray(Wz, dtype=np.float64)
    if Wq.shape != Wz.shape:
        raise InvalidArgumentError(f"graph shapes differ: {Wq.shape} vs {Wz.shape}")
    # log of the normalized W^z taken as a log-ratio, so tiny affinities at
    # low temperature are not clamped
    Wq_hat = row_normalize(Wq)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_hat = np.log(Wz) - np.log(Wz.sum(axis=1, keepdims=True))
        terms = np.where(Wq_hat > 0, Wq_hat * log_hat, 0.0)
    return float(np.mean(-terms.sum(axis=1)))


def contrastive_similarity_grad(Wq, Wz, t: float) -> np.ndarray:
    """d(contrastive_loss) / dS where W^z = exp(S / t); W^q is a constant."""
    Wq_hat = row_normalize(Wq)
    Wz_hat = row_normalize(Wz)
    return (Wz_hat - Wq_hat) / (len(Wq_hat) * t)


def decomposition_check(Wq, Wz, self_index=None) -> tuple[np.ndarray, np.ndarray]:
    """Split each row's cross-entropy into the self-loop term and the peer term.

    Both terms divide by the unnormalized row sum of W^z. ``self_index`` gives
    each row's self-loop column (the diagonal by default).
    """
    Wq = np.asarray(Wq, dtype=np.float64)
    Wz = np.asarray(Wz, dtype=np.float64)
    if Wq.shape != Wz.shape:
        raise InvalidArgumentError(f"graph shapes differ: {Wq.shape} vs {Wz.shape}")
    n = len(Wq)
    rows = np.arange(n)
    cols = rows if self_index is None else np.asarray(self_index)
    Wq_hat = row_normalize(Wq)
    log_ratio = np.log(Wz) - np.log(Wz.sum(axis=1, keepdims=True))
    term_self = -Wq_hat[rows, cols] * log_ratio[rows, cols]
    peer = -Wq_hat * log_ratio
    peer[rows, cols] = 0.0
    return term_self, peer.sum(axis=1)


def mean_graph_degree(Wq, self_index=None) -> float:
    """Average count of nonzero edges per row, excluding the self-loop."""
    Wq = np.asarray(Wq)
    rows = np.arange(len(Wq))
    cols = rows if self_index is None else np.asarray(self_index)
    nz = Wq > 0
    nz[rows, cols] = False
    return float(nz.sum(axis=1).mean())


def dump_graph_csv(W, path: str | Path) -> None:
    """Write nonzero entries as ``row,col,value`` lines."""
    W = np.asarray(W)
    r, c = np.nonzero(W)
    with open(path, "w") as fh:
        fh.write("row,col,value\n")
        for i, j in zip(r, c):
            fh.write(f"{i},{j},{float(W[i, j])!r}\n")
