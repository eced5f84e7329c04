"""Elementary numerical primitives.

All functions operate along the last axis so they accept either a single
vector or a batch of row vectors.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError, NumericError

LOG_EPS = 1e-12
NORM_EPS = 1e-12


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax along the last axis (subtract-max)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(temperature) or temperature <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(logits)):
        raise InvalidArgumentError("logits must be finite")
    scaled = logits / temperature
    scaled = scaled - scaled.max(axis=-1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(target, prediction) -> np.ndarray | float:
    """H(target, prediction) = -sum_i target_i log prediction_i.

    Prediction entries are clamped below at ``LOG_EPS`` before the log.
    Returns a float for vector input, an array of per-row values otherwise.
    """
    target = np.asarray(target, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    if target.shape != prediction.shape:
        raise InvalidArgumentError(
            f"shape mismatch: target {target.shape} vs prediction {prediction.shape}"
        )
    h = -np.sum(target * np.log(np.maximum(prediction, LOG_EPS)), axis=-1)
    return float(h) if h.ndim == 0 else h


def entropy(p) -> np.ndarray | float:
    return cross_entropy(p, p)


def l2_normalize(v, eps: float = NORM_EPS) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm <= eps):
        raise DegenerateInputError("cannot normalize a vector with near-zero norm")
    return v / norm


def row_normalize(W) -> np.ndarray:
    """Scale each row of a nonnegative matrix to sum to one."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise InvalidArgumentError(f"expected a matrix, got shape {W.shape}")
    sums = W.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise DegenerateInputError("row with non-positive sum cannot be normalized")
    return W / sums


def finite_difference_gradient(
    loss_fn: Callable[[np.ndarray], float], params, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.array(params, dtype=np.float64).ravel()
    grad = np.empty_like(theta)
    for i in range(theta.size):
        orig = theta[i]
        theta[i] = orig + eps
        f_plus = loss_fn(theta.copy())
        theta[i] = orig - eps
        f_minus = loss_fn(theta.copy())
        theta[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"non-finite loss while perturbing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
