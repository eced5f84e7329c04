"""Encoder, classification head and projection head as a small tanh MLP.

Parameters live in a flat ``dict`` keyed ``"<module>.<layer>.<weight|bias>"``.
Weights are stored ``(out_features, in_features)`` so a dense layer computes
``x @ W.T + b`` on row-major batches.

Backward is hand-written for this fixed architecture. A training step may run
several forward passes (weak labeled view, two strong unlabeled views); each
pass yields a :class:`ForwardCache`, and the loss side supplies the gradient
with respect to that pass's logits and/or embeddings. Anything that did not go
through a cache here (pseudo-labels, graph targets, memory and queue content,
EMA outputs) is a constant by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InvalidArgumentError, NumericError
from .numerics import l2_normalize, softmax

Params = dict[str, np.ndarray]

# (module, layer) in forward order.
LAYERS = (
    ("encoder", "fc1"),
    ("encoder", "fc2"),
    ("classifier", "fc"),
    ("projector", "fc1"),
    ("projector", "fc2"),
)


@dataclass(frozen=True)
class ModelSizes:
    input_dim: int
    n_classes: int
    hidden: int = 64
    feature_dim: int = 64
    proj_hidden: int = 64
    embed_dim: int = 16

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return {
            "encoder.fc1": (self.hidden, self.input_dim),
            "encoder.fc2": (self.feature_dim, self.hidden),
            "classifier.fc": (self.n_classes, self.feature_dim),
            "projector.fc1": (self.proj_hidden, self.feature_dim),
            "projector.fc2": (self.embed_dim, self.proj_hidden),
        }

    def param_count(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes().values())


def init_params(sizes: ModelSizes, seed: int = 0) -> Params:
    """Uniform(-a, a) weights with a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, (fan_out, fan_in) in sizes.layer_shapes().items():
        a = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.weight"] = rng.uniform(-a, a, size=(fan_out, fan_in))
        params[f"{name}.bias"] = np.zeros(fan_out)
    return params


def sizes_of(params: Params) -> ModelSizes:
    return ModelSizes(
        input_dim=params["encoder.fc1.weight"].shape[1],
        n_classes=params["classifier.fc.weight"].shape[0],
        hidden=params["encoder.fc1.weight"].shape[0],
        feature_dim=params["encoder.fc2.weight"].shape[0],
        proj_hidden=params["projector.fc1.weight"].shape[0],
        embed_dim=params["projector.fc2.weight"].shape[0],
    )


def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


def flatten(params: Params) -> np.ndarray:
    return np.concatenate([params[k].ravel() for k in params])


def unflatten(vec: np.ndarray, like: Params) -> Params:
    out, i = {}, 0
    for k, v in like.items():
        out[k] = np.asarray(vec[i : i + v.size], dtype=np.float64).reshape(v.shape)
        i += v.size
    if i != len(vec):
        raise InvalidArgumentError(f"vector has {len(vec)} entries, params need {i}")
    return out


@dataclass
class ForwardCache:
    x: np.ndarray
    h1: np.ndarray
    h2: np.ndarray  # encoder output f(x)
    logits: np.ndarray
    probs: np.ndarray
    p1: np.ndarray
    u: np.ndarray  # projector output before normalization
    u_norm: np.ndarray
    z: np.ndarray


def _dense(params: Params, name: str, x: np.ndarray) -> np.ndarray:
    out = x @ params[f"{name}.weight"].T + params[f"{name}.bias"]
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite activation in {name}")
    return out


def forward(params: Params, x) -> ForwardCache:
    """Run both heads on a batch ``x`` of shape (N, input_dim)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    in_dim = params["encoder.fc1.weight"].shape[1]
    if x.shape[1] != in_dim:
        raise InvalidArgumentError(f"expected input dimension {in_dim}, got {x.shape[1]}")
    h1 = np.tanh(_dense(params, "encoder.fc1", x))
    h2 = np.tanh(_dense(params, "encoder.fc2", h1))
    logits = _dense(params, "classifier.fc", h2)
    p1 = np.tanh(_dense(params, "projector.fc1", h2))
    u = _dense(params, "projector.fc2", p1)
    z = l2_normalize(u)
    u_norm = np.linalg.norm(u, axis=1, keepdims=True)
    return ForwardCache(x, h1, h2, logits, softmax(logits), p1, u, u_norm, z)


def forward_class(params: Params, x) -> np.ndarray:
    """Class probabilities p(y|x) = h(f(x)); 1-D input gives a 1-D result."""
    probs = forward(params, x).probs
    return probs[0] if np.ndim(x) == 1 else probs


def forward_embed(params: Params, x) -> np.ndarray:
    """Unit-norm embeddings z(x) = g(f(x))."""
    z = forward(params, x).z
    return z[0] if np.ndim(x) == 1 else z


@dataclass
class Contribution:
    """Upstream gradient for one forward pass. ``None`` marks an unused head."""

    cache: ForwardCache
    d_logits: np.ndarray | None = None
    d_embed: np.ndarray | None = None


def _check(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite gradient in {name}")


def backward(params: Params, contributions: Iterable[Contribution]) -> Params:
    """Gradient of the recorded loss with respect to every parameter."""
    grads = zeros_like(params)
    for c in contributions:
        _backward_one(params, c, grads)
    return grads


def _accumulate(grads: Params, name: str, d_out: np.ndarray, inp: np.ndarray) -> None:
    dW = d_out.T @ inp
    db = d_out.sum(axis=0)
    _check(name, dW, db)
    grads[f"{name}.weight"] += dW
    grads[f"{name}.bias"] += db


def _backward_one(params: Params, c: Contribution, grads: Params) -> None:
    cache = c.cache
    if c.d_logits is None and c.d_embed is None:
        return
    d_h2 = np.zeros_like(cache.h2)
    if c.d_logits is not None:
        _accumulate(grads, "classifier.fc", c.d_logits, cache.h2)
        d_h2 += c.d_logits @ params["classifier.fc.weight"]
    if c.d_embed is not None:
        dz = c.d_embed
        z = cache.z
        # Jacobian of u / ||u||.
        d_u = (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / cache.u_norm
        _accumulate(grads, "projector.fc2", d_u, cache.p1)
        d_a3 = (d_u @ params["projector.fc2.weight"]) * (1.0 - cache.p1**2)
        _accumulate(grads, "projector.fc1", d_a3, cache.h2)
        d_h2 += d_a3 @ params["projector.fc1.weight"]
    d_a2 = d_h2 * (1.0 - cache.h2**2)
    _accumulate(grads, "encoder.fc2", d_a2, cache.h1)
    d_a1 = (d_a2 @ params["encoder.fc2.weight"]) * (1.0 - cache.h1**2)
    _accumulate(grads, "encoder.fc1", d_a1, cache.x)


def ema_update(ema: Params, params: Params, m: float) -> Params:
    """Blend ``m * ema + (1 - m) * params`` elementwise; returns a new dict."""
    if not 0.0 <= m <= 1.0:
        raise InvalidArgumentError(f"EMA momentum must lie in [0, 1], got {m}")
    if ema.keys() != params.keys():
        raise InvalidArgumentError("EMA and model parameters have different layers")
    out = {}
    for k, theta in params.items():
        if ema[k].shape != theta.shape:
            raise InvalidArgumentError(f"shape mismatch for {k}")
        out[k] = m * ema[k] + (1.0 - m) * theta
    return out


def save_params(params: Params, path: str | Path) -> None:
    np.savez(path, **params)


def load_params(path: str | Path) -> Params:
    with np.load(path) as f:
        return {k: f[k].astype(np.float64) for k in f.files}
