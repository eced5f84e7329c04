"""Direct-formula reference evaluations in plain Python.

These loop over scalars with :mod:`math` only and share no code with the
vectorized engine, so agreement between the two is meaningful.
"""

from __future__ import annotations

import math
from typing import Sequence

Vec = Sequence[float]
Mat = Sequence[Sequence[float]]


def dot(a: Vec, b: Vec) -> float:
    return math.fsum(x * y for x, y in zip(a, b))


def affinity(z_b: Vec, bank_embeds: Mat, t: float) -> list[float]:
    e = [math.exp(dot(z_b, z_k) / t) for z_k in bank_embeds]
    s = math.fsum(e)
    return [v / s for v in e]


def smooth_pseudo_label(p_b: Vec, z_b: Vec, bank_probs: Mat, bank_embeds: Mat, alpha: float, t: float) -> list[float]:
    a = affinity(z_b, bank_embeds, t)
    C = len(p_b)
    return [
        alpha * p_b[c] + (1 - alpha) * math.fsum(a[k] * bank_probs[k][c] for k in range(len(a)))
        for c in range(C)
    ]


def pseudo_label_graph(q: Mat, T: float) -> list[list[float]]:
    n = len(q)
    W = [[0.0] * n for _ in range(n)]
    for b in range(n):
        for j in range(n):
            if b == j:
                W[b][j] = 1.0
            else:
                s = dot(q[b], q[j])
                W[b][j] = s if s >= T else 0.0
    return W


def embedding_graph(z: Mat, z_prime: Mat, t: float) -> list[list[float]]:
    n = len(z)
    return [
        [math.exp((dot(z[b], z_prime[b]) if b == j else dot(z[b], z[j])) / t) for j in range(n)]
        for b in range(n)
    ]


def _normalize_rows(W: Mat) -> list[list[float]]:
    out = []
    for row in W:
        s = math.fsum(row)
        out.append([v / s for v in row])
    return out


def graph_cross_entropy_rows(Wq: Mat, Wz: Mat) -> list[float]:
    Wq_hat, Wz_hat = _normalize_rows(Wq), _normalize_rows(Wz)
    return [
        -math.fsum(a * math.log(b) for a, b in zip(rq, rz) if a > 0)
        for rq, rz in zip(Wq_hat, Wz_hat)
    ]


def contrastive_loss(Wq: Mat, Wz: Mat) -> float:
    rows = graph_cross_entropy_rows(Wq, Wz)
    return math.fsum(rows) / len(rows)


def decomposition(Wq: Mat, Wz: Mat) -> list[tuple[float, float]]:
    """(self term, peer term) per row, dividing by the unnormalized W^z row sum."""
    Wq_hat = _normalize_rows(Wq)
    out = []
    for b, (rq, rz) in enumerate(zip(Wq_hat, Wz)):
        denom = math.fsum(rz)
        self_term = -rq[b] * math.log(rz[b] / denom)
        peer = -math.fsum(rq[j] * math.log(rz[j] / denom) for j in range(len(rz)) if j != b)
        out.append((self_term, peer))
    return out


def infonce(z: Mat, z_prime: Mat, t: float) -> float:
    """Mean instance-discrimination loss: positive z'_i, negatives z_j (j != i)."""
    n = len(z)
    total = []
    for i in range(n):
        pos = dot(z[i], z_prime[i]) / t
        logits = [pos] + [dot(z[i], z[j]) / t for j in range(n) if j != i]
        m = max(logits)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in logits))
        total.append(lse - pos)
    return math.fsum(total) / n
