"""The three-loss objective, its optimizer, and one full training iteration.

A step runs in two phases. First, with no gradient, it builds targets: pseudo-labels from
the weak unlabeled view (raw model in batch mode, EMA model in queue mode),
the confidence mask, and the pseudo-label graph. Second, it evaluates the
losses through the raw model and backpropagates into f, h and g only.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import graph as G
from . import model as M
from .data import AugmentPolicy, strong_augment, weak_augment
from .errors import InvalidArgumentError, NumericError
from .numerics import LOG_EPS, cross_entropy
from .pseudolabel import DistributionAligner, MemoryBank, confidence_mask, memory_smoothed_labels

MODES = ("batch", "queue")


@dataclass
class HyperParams:
    B: int = 64
    mu: int = 7
    lambda_cls: float = 1.0
    lambda_ctr: float = 5.0
    alpha: float = 0.9
    K: int = 256
    t: float = 0.2
    tau: float = 0.95
    T: float = 0.7
    lr0: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 200
    ema_m: float = 0.996
    da_rho: float = 0.99
    distribution_alignment: bool = True
    mode: str = "batch"

    def __post_init__(self):
        for name in ("B", "mu", "K"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be a positive integer")
        for name in ("t", "lr0"):
            if getattr(self, name) <= 0:
                raise InvalidArgumentError(f"{name} must be positive")
        for name in ("lambda_cls", "lambda_ctr", "weight_decay", "sgd_momentum", "epochs"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be nonnegative")
        for name in ("alpha", "tau", "T", "ema_m"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.da_rho < 1.0:
            raise InvalidArgumentError("da_rho must lie in [0, 1)")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "queue" and self.K < self.mu * self.B:
            raise InvalidArgumentError("queue mode needs K >= mu * B to hold the current batch")

    @property
    def unlabeled_batch(self) -> int:
        return self.mu * self.B


@dataclass
class TrainState:
    params: M.Params
    ema: M.Params
    velocity: M.Params
    bank: MemoryBank
    queue: G.MomentumQueue
    aligner: DistributionAligner
    rng: np.random.Generator
    step: int = 0


def init_train_state(sizes: M.ModelSizes, hp: HyperParams, seed: int = 0) -> TrainState:
    params = M.init_params(sizes, seed)
    return TrainState(
        params=params,
        ema=M.copy_params(params),
        velocity=M.zeros_like(params),
        bank=MemoryBank(hp.K, sizes.n_classes, sizes.embed_dim),
        queue=G.MomentumQueue(hp.K, sizes.n_classes, sizes.embed_dim),
        aligner=DistributionAligner(sizes.n_classes, hp.da_rho),
        rng=np.random.default_rng([seed, 1]),
    )


# losses -------------------------------------------------------------------


def _soft_ce_grad(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """d H(target, softmax(l)) / dl with the log clamp honoured."""
    live = targets * (probs >= LOG_EPS)
    return probs * live.sum(axis=1, keepdims=True) - live


def supervised_loss(params: M.Params, x, y_onehot) -> float:
    """Mean cross-entropy of predictions on (already weak-augmented) ``x``."""
    y_onehot = np.atleast_2d(np.asarray(y_onehot, dtype=np.float64))
    if len(y_onehot) == 0:
        raise InvalidArgumentError("labeled batch is empty")
    return float(np.mean(cross_entropy(y_onehot, M.forward(params, x).probs)))


def unsupervised_cls_loss(params: M.Params, u_strong, q, tau: float) -> float:
    """Masked soft cross-entropy, divided by the full unlabeled batch size."""
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    mask = confidence_mask(q, tau)
    h = cross_entropy(q, M.forward(params, u_strong).probs)
    return float(np.sum(mask * h) / len(q))


def total_loss(l_x: float, l_cls: float, l_ctr: float, lambda_cls: float, lambda_ctr: float) -> float:
    for v in (l_x, l_cls, l_ctr):
        if not math.isfinite(v):
            raise NumericError("non-finite loss component")
    return l_x + lambda_cls * l_cls + lambda_ctr * l_ctr


@dataclass
class LossInputs:
    """Everything the differentiable part of a step needs; non-model arrays are constants."""

    x_weak: np.ndarray
    y_onehot: np.ndarray
    u_strong1: np.ndarray
    u_strong2: np.ndarray | None
    q: np.ndarray
    mask: np.ndarray
    Wq: np.ndarray
    queue_embeds: np.ndarray | None = None  # queue mode only


@dataclass
class LossBreakdown:
    l_x: float
    l_cls: float
    l_ctr: float
    total: float


def loss_and_grad(
    params: M.Params,
    inp: LossInputs,
    lambda_cls: float,
    lambda_ctr: float,
    t: float,
    with_grad: bool = True,
    lambda_x: float = 1.0,
) -> tuple[LossBreakdown, M.Params | None, dict]:
    """Evaluate the weighted objective and, optionally, its parameter gradient.

    ``lambda_x`` scales the supervised term; it is 1 in training and only
    lets the gradient check isolate single terms. Returns
    ``(losses, grads, extras)``; ``extras`` carries the embedding graph.
    """
    fx = M.forward(params, inp.x_weak)
    B = len(inp.x_weak)
    l_x = float(np.mean(cross_entropy(inp.y_onehot, fx.probs)))

    f1 = M.forward(params, inp.u_strong1)
    n_u = len(inp.u_strong1)
    l_cls = float(np.sum(inp.mask * cross_entropy(inp.q, f1.probs)) / n_u)

    if inp.queue_embeds is None:
        f2 = M.forward(params, inp.u_strong2)
        Wz = G.build_embedding_graph(f1.z, f2.z, t)
    else:
        f2 = None
        Wz = np.exp(f1.z @ inp.queue_embeds.T / t)
    l_ctr = G.contrastive_loss(inp.Wq, Wz)
    total = total_loss(lambda_x * l_x, l_cls, l_ctr, lambda_cls, lambda_ctr)
    losses = LossBreakdown(l_x, l_cls, l_ctr, total)
    extras = {"Wz": Wz}
    if not with_grad:
        return losses, None, extras

    d_logits_x = _soft_ce_grad(fx.probs, inp.y_onehot) / B
    if lambda_x != 1.0:
        d_logits_x = lambda_x * d_logits_x
    d_logits_1 = lambda_cls * inp.mask[:, None] * _soft_ce_grad(f1.probs, inp.q) / n_u
    dS = lambda_ctr * G.contrastive_similarity_grad(inp.Wq, Wz, t)
    contributions = [M.Contribution(fx, d_logits=d_logits_x)]
    if inp.queue_embeds is None:
        # S_bj = z_b . z_j off the diagonal, z_b . z'_b on it.
        diag = np.diag(dS)
        off = dS - np.diag(diag)
        dz1 = off @ f1.z + off.T @ f1.z + diag[:, None] * f2.z
        dz2 = diag[:, None] * f1.z
        contributions.append(M.Contribution(f1, d_logits=d_logits_1, d_embed=dz1))
        contributions.append(M.Contribution(f2, d_embed=dz2))
    else:
        dz1 = dS @ inp.queue_embeds
        contributions.append(M.Contribution(f1, d_logits=d_logits_1, d_embed=dz1))
    grads = M.backward(params, contributions)
    return losses, grads, extras


# optimization -------------------------------------------------------------


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Half-cosine decay from ``lr0`` at step 0 to zero at ``total_steps``."""
    if total_steps < 1:
        raise InvalidArgumentError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise InvalidArgumentError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(
    params: M.Params,
    grads: M.Params,
    velocity: M.Params,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[M.Params, M.Params]:
    """v <- momentum * v + g + wd * theta;  theta <- theta - lr * v."""
    new_p, new_v = {}, {}
    for k, theta in params.items():
        g = grads[k]
        if g.shape != theta.shape:
            raise InvalidArgumentError(f"gradient shape mismatch for {k}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
        v = momentum * velocity[k] + g + weight_decay * theta
        new_v[k] = v
        new_p[k] = theta - lr * v
    return new_p, new_v


# training step ------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    lr: float
    l_x: float
    l_cls: float
    l_ctr: float
    total: float
    confident_ratio: float
    mean_graph_degree: float
    pseudo_labels: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    graphs: dict = field(default_factory=dict, repr=False)


def one_hot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    out = np.zeros((len(y), n_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def train_step(
    state: TrainState,
    x_labeled,
    y_labeled,
    u,
    hp: HyperParams,
    policy: AugmentPolicy,
    total_steps: int,
) -> tuple[TrainState, StepMetrics]:
    """One CoMatch iteration; returns a new state and leaves ``state`` untouched."""
    x_labeled = np.atleast_2d(np.asarray(x_labeled, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    if len(x_labeled) == 0:
        raise InvalidArgumentError("labeled batch is empty")
    if len(u) != hp.unlabeled_batch:
        raise InvalidArgumentError(f"unlabeled batch has {len(u)} rows, expected {hp.unlabeled_batch}")
    s = copy.deepcopy(state)
    queue_mode = hp.mode == "queue"
    C = s.params["classifier.fc.weight"].shape[0]

    xw = weak_augment(x_labeled, policy, s.rng)
    uw = weak_augment(u, policy, s.rng)
    us1 = strong_augment(u, policy, s.rng)
    us2 = strong_augment(u, policy, s.rng)
    y1h = one_hot(y_labeled, C)

    # Targets (no gradient).
    teacher = s.ema if queue_mode else s.params
    fu = M.forward(teacher, uw)
    p_w = s.aligner.align(fu.probs) if hp.distribution_alignment else fu.probs
    q = memory_smoothed_labels(p_w, fu.z, s.bank, hp.alpha, hp.t)
    mask = confidence_mask(q, hp.tau).astype(np.float64)
    z_x_bank = M.forward(teacher, xw).z

    if queue_mode:
        zbar2 = M.forward(s.ema, us2).z
        s.queue.push(q, zbar2)
        self_index = s.queue.batch_positions
        Wq = G.build_queue_pseudo_label_graph(q, s.queue, hp.T)
        inputs = LossInputs(xw, y1h, us1, None, q, mask, Wq, queue_embeds=s.queue.embeds)
    else:
        self_index = None
        Wq = G.build_pseudo_label_graph(q, hp.T)
        inputs = LossInputs(xw, y1h, us1, us2, q, mask, Wq)

    losses, grads, extras = loss_and_grad(s.params, inputs, hp.lambda_cls, hp.lambda_ctr, hp.t)
    lr = cosine_lr(s.step, total_steps, hp.lr0)
    s.params, s.velocity = sgd_step(s.params, grads, s.velocity, lr, hp.sgd_momentum, hp.weight_decay)
    s.ema = M.ema_update(s.ema, s.params, hp.ema_m)

    # Smoothing above used the pre-step bank. Labeled entries go in last so
    # a bank smaller than one step's pushes still keeps ground truth.
    s.bank.push(p_w, fu.z, labeled=False)
    s.bank.push(y1h, z_x_bank, labeled=True)
    metrics = StepMetrics(
        step=s.step,
        lr=lr,
        l_x=losses.l_x,
        l_cls=losses.l_cls,
        l_ctr=losses.l_ctr,
        total=losses.total,
        confident_ratio=float(mask.mean()),
        mean_graph_degree=G.mean_graph_degree(Wq, self_index),
        pseudo_labels=q,
        mask=mask.astype(bool),
        graphs={"Wq": Wq, "Wz": extras["Wz"]},
    )
    s.step += 1
    return s, metrics


# evaluation ---------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    per_class: np.ndarray


def eval_params(state: TrainState, hp: HyperParams) -> M.Params:
    """EMA weights in queue mode, raw weights in batch mode."""
    return state.ema if hp.mode == "queue" else state.params


def evaluate(params: M.Params, X, y) -> EvalResult:
    """Top-1 accuracy; ties go to the lowest class index."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise InvalidArgumentError("test set is empty")
    probs = M.forward(params, X).probs
    pred = np.argmax(probs, axis=1)
    correct = pred == y
    C = probs.shape[1]
    per_class = np.array(
        [correct[y == c].mean() if np.any(y == c) else np.nan for c in range(C)]
    )
    return EvalResult(float(correct.mean()), per_class)


# checkpoints --------------------------------------------------------------


def save_checkpoint(state: TrainState, hp: HyperParams, path: str | Path, extra: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = dict(state.params)
    arrays.update({f"ema.{k}": v for k, v in state.ema.items()})
    arrays.update({f"velocity.{k}": v for k, v in state.velocity.items()})
    arrays["bank.probs"] = state.bank.probs
    arrays["bank.embeds"] = state.bank.embeds
    arrays["bank.labeled"] = state.bank.labeled
    arrays["queue.probs"] = state.queue.probs
    arrays["queue.embeds"] = state.queue.embeds
    arrays["queue.batch_positions"] = state.queue.batch_positions
    arrays["aligner.running_mean"] = state.aligner.running_mean
    meta = {
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "hyperparams": asdict(hp),
        "extra": extra or {},
    }
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[TrainState, HyperParams, dict]:
    with np.load(path) as f:
        data = {k: f[k] for k in f.files}
    meta = json.loads(str(data.pop("meta")))
    hp = HyperParams(**meta["hyperparams"])
    names = [f"{m}.{l}.{kind}" for m, l in M.LAYERS for kind in ("weight", "bias")]
    params = {k: data[k].astype(np.float64) for k in names}
    ema = {k: data[f"ema.{k}"].astype(np.float64) for k in names}
    velocity = {k: data[f"velocity.{k}"].astype(np.float64) for k in names}
    C, d = params["classifier.fc.weight"].shape[0], params["projector.fc2.weight"].shape[0]
    bank = MemoryBank(hp.K, C, d)
    bank.probs, bank.embeds, bank.labeled = data["bank.probs"], data["bank.embeds"], data["bank.labeled"]
    queue = G.MomentumQueue(hp.K, C, d)
    queue.probs, queue.embeds = data["queue.probs"], data["queue.embeds"]
    queue.batch_positions = data["queue.batch_positions"]
    aligner = DistributionAligner(C, hp.da_rho, running_mean=data["aligner.running_mean"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state = TrainState(params, ema, velocity, bank, queue, aligner, rng, meta["step"])
    return state, hp, meta["extra"]
