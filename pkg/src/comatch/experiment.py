"""Experiment orchestration behind the command-line entry points.

``run_train`` drives the training loop from an :class:`ExperimentConfig`,
``run_gradcheck`` compares backward against finite differences on a tiny
network, ``run_oracle`` checks the engine against the plain-Python reference
formulas on a user-supplied instance, and ``run_eval`` scores a checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as G
from . import model as M
from . import oracles
from . import pseudolabel as PL
from .data import (
    UNLABELED,
    AugmentPolicy,
    BatchSampler,
    Dataset,
    generate_blobs,
    generate_two_moons,
    read_dataset_csv,
    split_labels,
    strong_augment,
    weak_augment,
)
from .errors import InvalidArgumentError, NumericError, ParseError
from .numerics import finite_difference_gradient, max_relative_error
from .trainer import (
    HyperParams,
    LossInputs,
    TrainState,
    eval_params,
    evaluate,
    init_train_state,
    load_checkpoint,
    loss_and_grad,
    one_hot,
    save_checkpoint,
    train_step,
)

log = logging.getLogger("comatch")

METRICS_HEADER = (
    "step",
    "epoch",
    "lr",
    "L_x",
    "L_u_cls",
    "L_u_ctr",
    "total_loss",
    "pseudo_label_accuracy",
    "confident_ratio",
    "mean_graph_degree",
    "test_accuracy",
)

_HP_FIELDS = {f.name for f in dataclasses.fields(HyperParams)}


@dataclass
class ExperimentConfig:
    # dataset
    dataset: str = "two_moons"  # two_moons | blobs | csv
    n_train: int = 504
    n_test: int = 1000
    noise: float = 0.1
    blob_centers: list | None = None
    blob_sigma: float = 0.3
    train_csv: str | None = None
    test_csv: str | None = None
    per_class: int = 2
    # augmentation
    sigma_weak: float = 0.05
    sigma_strong: float = 0.15
    mask_prob: float = 0.2
    # model
    hidden: int = 64
    feature_dim: int = 64
    proj_hidden: int = 64
    embed_dim: int = 16
    # schedule; 0 means one pass over the unlabeled set
    steps_per_epoch: int = 10
    # run
    seed: int = 0
    out_dir: str = "runs/default"
    eval_every: int = 50
    dump_graphs: bool = False
    # training hyperparameters, same names as HyperParams
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

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.hyperparams()  # validate early
        cfg.policy()
        if cfg.dataset not in ("two_moons", "blobs", "csv"):
            raise InvalidArgumentError(f"unknown dataset {cfg.dataset!r}")
        if cfg.eval_every < 1:
            raise InvalidArgumentError("eval_every must be positive")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"config is not valid JSON: {exc.msg}", line=exc.lineno) from None
        if not isinstance(d, dict):
            raise ParseError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **changes})

    def hyperparams(self) -> HyperParams:
        return HyperParams(**{k: v for k, v in self.to_dict().items() if k in _HP_FIELDS})

    def policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.sigma_weak, self.sigma_strong, self.mask_prob)

    def sizes(self, input_dim: int, n_classes: int) -> M.ModelSizes:
        return M.ModelSizes(
            input_dim, n_classes, self.hidden, self.feature_dim, self.proj_hidden, self.embed_dim
        )


@dataclass
class Splits:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset
    n_classes: int


def load_data(cfg: ExperimentConfig) -> Splits:
    if cfg.dataset == "two_moons":
        train = generate_two_moons(cfg.n_train, cfg.noise, cfg.seed)
        test = generate_two_moons(cfg.n_test, cfg.noise, cfg.seed + 10_000)
    elif cfg.dataset == "blobs":
        centers = cfg.blob_centers or [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]]
        n_c = len(centers)
        train = generate_blobs(cfg.n_train - cfg.n_train % n_c, centers, cfg.blob_sigma, cfg.seed)
        test = generate_blobs(cfg.n_test - cfg.n_test % n_c, centers, cfg.blob_sigma, cfg.seed + 10_000)
    else:
        if not cfg.train_csv or not cfg.test_csv:
            raise InvalidArgumentError("csv dataset needs train_csv and test_csv")
        train = read_dataset_csv(cfg.train_csv, "train")
        test = read_dataset_csv(cfg.test_csv, "test")
        if np.any(train.labels == UNLABELED):
            lab = train.labels != UNLABELED
            labeled = Dataset(train.features[lab], train.labels[lab])
            unlabeled = Dataset(train.features[~lab], train.labels[~lab])
            C = int(max(train.labels.max(), test.labels.max())) + 1
            return Splits(labeled, unlabeled, test, C)
    test.split = "test"
    labeled, unlabeled = split_labels(train, cfg.per_class, cfg.seed)
    C = max(train.n_classes, test.n_classes)
    return Splits(labeled, unlabeled, test, C)


# training -----------------------------------------------------------------


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@dataclass
class RunResult:
    summary: dict
    rows: list[dict]
    history: list[dict] = field(repr=False)
    state: TrainState = field(repr=False)


def _pseudo_label_accuracy(q, mask, truth) -> float | None:
    if truth is None or not np.any(mask):
        return None
    return float(np.mean(np.argmax(q[mask], axis=1) == truth[mask]))


def run_train(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    """Train per ``cfg``; with ``write`` the outputs land in ``cfg.out_dir``.

    Files: ``config.json`` (effective config), ``metrics.csv``,
    ``checkpoint.npz``, ``summary.json`` and, with ``dump_graphs``, one
    pseudo-label and one embedding graph CSV per metrics row.
    """
    t0 = time.perf_counter()
    hp = cfg.hyperparams()
    policy = cfg.policy()
    splits = load_data(cfg)
    lab, unl, test = splits.labeled, splits.unlabeled, splits.test
    sizes = cfg.sizes(lab.features.shape[1], splits.n_classes)
    state = init_train_state(sizes, hp, cfg.seed)
    sampler = BatchSampler(len(lab), len(unl), hp.B, hp.mu, cfg.seed)
    spe = cfg.steps_per_epoch or sampler.batches_per_epoch
    total_steps = hp.epochs * spe
    truth = unl.hidden_labels

    out = Path(cfg.out_dir)
    metrics_fh = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        metrics_fh = open(out / "metrics.csv", "w")
        metrics_fh.write(",".join(METRICS_HEADER) + "\n")
        metrics_fh.flush()
        if cfg.dump_graphs:
            (out / "graphs").mkdir(exist_ok=True)

    rows: list[dict] = []
    history: list[dict] = []
    best = -1.0

    def emit(step: int, lr: float, m=None) -> float:
        nonlocal best
        acc = evaluate(eval_params(state, hp), test.features, test.labels).accuracy
        best = max(best, acc)
        row = dict.fromkeys(METRICS_HEADER)
        row.update(step=step, epoch=step // spe, lr=lr, test_accuracy=acc)
        if m is not None:
            row.update(
                L_x=m.l_x,
                L_u_cls=m.l_cls,
                L_u_ctr=m.l_ctr,
                total_loss=m.total,
                pseudo_label_accuracy=history[-1]["pseudo_label_accuracy"],
                confident_ratio=m.confident_ratio,
                mean_graph_degree=m.mean_graph_degree,
            )
            if cfg.dump_graphs and write:
                G.dump_graph_csv(m.graphs["Wq"], out / "graphs" / f"step_{step:06d}_Wq.csv")
                G.dump_graph_csv(m.graphs["Wz"], out / "graphs" / f"step_{step:06d}_Wz.csv")
        rows.append(row)
        if metrics_fh is not None:
            # One write per complete line.
            metrics_fh.write(",".join(_fmt(row[k]) for k in METRICS_HEADER) + "\n")
            metrics_fh.flush()
        log.info("step %d test_accuracy %.4f", step, acc)
        return acc

    try:
        emit(0, hp.lr0)
        for _ in range(total_steps):
            li, ui = sampler.next()
            try:
                new_state, m = train_step(
                    state, lab.features[li], lab.labels[li], unl.features[ui], hp, policy, total_steps
                )
            except NumericError:
                if write:
                    save_checkpoint(state, hp, out / "checkpoint.npz", {"sampler": sampler.get_state()})
                log.error("numeric failure at step %d; saved last good state", state.step)
                raise
            state = new_state
            history.append(
                {
                    "step": state.step,
                    "epoch": (state.step - 1) // spe,
                    "lr": m.lr,
                    "L_x": m.l_x,
                    "L_u_cls": m.l_cls,
                    "L_u_ctr": m.l_ctr,
                    "total_loss": m.total,
                    "confident_ratio": m.confident_ratio,
                    "mean_graph_degree": m.mean_graph_degree,
                    "pseudo_label_accuracy": _pseudo_label_accuracy(
                        m.pseudo_labels, m.mask, None if truth is None else truth[ui]
                    ),
                }
            )
            if state.step % cfg.eval_every == 0 or state.step == total_steps:
                emit(state.step, m.lr, m)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    final = evaluate(eval_params(state, hp), test.features, test.labels)
    summary = {
        "final_test_accuracy": final.accuracy,
        "best_test_accuracy": best,
        "per_class_accuracy": [None if math.isnan(v) else float(v) for v in final.per_class],
        "steps": state.step,
        "steps_per_epoch": spe,
        "wall_time_seconds": time.perf_counter() - t0,
    }
    if write:
        save_checkpoint(state, hp, out / "checkpoint.npz", {"sampler": sampler.get_state()})
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return RunResult(summary, rows, history, state)


# gradient check -----------------------------------------------------------

TINY = dict(hidden=3, feature_dim=3, proj_hidden=3, embed_dim=3)


@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def lines(self) -> list[str]:
        out = [
            f"{name:<8} max_rel_err={err:.3e} {'PASS' if err < self.tolerance else 'FAIL'}"
            for name, err in self.errors.items()
        ]
        out.append("PASS" if self.passed else "FAIL")
        return out


def gradcheck_instance(cfg: ExperimentConfig, n_labeled: int = 3, n_unlabeled: int = 4, seed: int = 0):
    """A tiny network plus fixed loss inputs drawn from the configured data."""
    rng = np.random.default_rng(seed)
    splits = load_data(cfg.replace(per_class=1) if cfg.dataset != "csv" else cfg)
    C = splits.n_classes
    d_in = splits.labeled.features.shape[1]
    sizes = M.ModelSizes(d_in, C, **TINY)
    params = M.init_params(sizes, seed)
    # Larger weights so every term has a sizeable gradient.
    params = {k: 2.0 * v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    policy = cfg.policy()
    xi = rng.integers(0, len(splits.labeled), n_labeled)
    ui = rng.choice(len(splits.unlabeled), n_unlabeled, replace=False)
    x = weak_augment(splits.labeled.features[xi], policy, rng)
    y = one_hot(splits.labeled.labels[xi], C)
    u = splits.unlabeled.features[ui]
    u1, u2 = strong_augment(u, policy, rng), strong_augment(u, policy, rng)
    q = rng.dirichlet(np.full(C, 0.3), n_unlabeled)
    q[: n_unlabeled // 2] = 0.02 / C + 0.98 * one_hot(np.arange(n_unlabeled // 2) % C, C)
    mask = PL.confidence_mask(q, min(cfg.tau, 0.9)).astype(np.float64)
    if cfg.mode == "queue":
        queue = G.MomentumQueue(2 * n_unlabeled, C, sizes.embed_dim)
        queue.push(rng.dirichlet(np.ones(C), n_unlabeled), M.forward_embed(params, u2[::-1]))
        queue.push(q, M.forward_embed(params, u2))
        Wq = G.build_queue_pseudo_label_graph(q, queue, min(cfg.T, 0.5))
        inp = LossInputs(x, y, u1, None, q, mask, Wq, queue_embeds=queue.embeds)
    else:
        Wq = G.build_pseudo_label_graph(q, min(cfg.T, 0.5))
        inp = LossInputs(x, y, u1, u2, q, mask, Wq)
    return params, inp


def run_gradcheck(cfg: ExperimentConfig, eps: float = 1e-5, corrupt: bool = False) -> GradcheckReport:
    """Per-term max relative error of backward vs central differences.

    ``corrupt`` perturbs the analytic gradient (negative control).
    """
    params, inp = gradcheck_instance(cfg)
    t = cfg.t
    terms = {"L_x": (1.0, 0.0, 0.0)}
    if cfg.lambda_cls > 0:
        terms["L_u_cls"] = (0.0, 1.0, 0.0)
    if cfg.lambda_ctr > 0:
        terms["L_u_ctr"] = (0.0, 0.0, 1.0)
    terms["total"] = (1.0, cfg.lambda_cls, cfg.lambda_ctr)
    theta0 = M.flatten(params)
    errors = {}
    for name, (wx, wc, wr) in terms.items():
        _, grads, _ = loss_and_grad(params, inp, wc, wr, t, lambda_x=wx)
        analytic = M.flatten(grads)
        if corrupt:
            analytic = analytic * 1.01 + 1e-3

        def f(theta, wx=wx, wc=wc, wr=wr):
            return loss_and_grad(M.unflatten(theta, params), inp, wc, wr, t, with_grad=False, lambda_x=wx)[0].total

        numeric = finite_difference_gradient(f, theta0, eps)
        errors[name] = max_relative_error(analytic, numeric)
    return GradcheckReport(errors)


# oracle comparisons -------------------------------------------------------


@dataclass
class OracleReport:
    subject: str
    comparisons: list[tuple[str, float]]

    @property
    def max_deviation(self) -> float:
        return max((d for _, d in self.comparisons), default=0.0)

    def lines(self) -> list[str]:
        out = [f"{name}: max |engine - oracle| = {dev:.3e}" for name, dev in self.comparisons]
        out.append(f"{self.subject}: max deviation {self.max_deviation:.3e}")
        return out


def _dev(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _field(inst: dict, key: str):
    if key not in inst:
        raise ParseError(f"instance is missing {key!r}")
    return inst[key]


def _matrix(inst: dict, key: str) -> np.ndarray:
    try:
        m = np.asarray(_field(inst, key), dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"{key!r} must be a rectangular numeric matrix") from None
    if m.ndim != 2:
        raise ParseError(f"{key!r} must be a list of vectors")
    return m


def run_oracle(subject: str, instance: dict | str | Path) -> OracleReport:
    """Compare the engine to direct formulas on a small JSON instance.

    pseudolabel: p, z, bank_probs, bank_embeds, alpha, t
    graph / loss: q, z, z_prime, T, t
    """
    if not isinstance(instance, dict):
        try:
            instance = json.loads(Path(instance).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"instance is not valid JSON: {exc.msg}", line=exc.lineno) from None
    cmp: list[tuple[str, float]] = []
    if subject == "pseudolabel":
        p, z = _matrix(instance, "p"), _matrix(instance, "z")
        bp, bz = _matrix(instance, "bank_probs"), _matrix(instance, "bank_embeds")
        alpha, t = float(_field(instance, "alpha")), float(_field(instance, "t"))
        a = PL.affinity(z, bz, t)
        q = PL.smooth_pseudo_label(p, a, bp, alpha)
        a_ref = [oracles.affinity(zb, bz.tolist(), t) for zb in z.tolist()]
        q_ref = [oracles.smooth_pseudo_label(pb, zb, bp.tolist(), bz.tolist(), alpha, t) for pb, zb in zip(p.tolist(), z.tolist())]
        cmp += [("affinity", _dev(a, a_ref)), ("pseudo_label", _dev(q, q_ref))]
    elif subject in ("graph", "loss"):
        q, z, zp = _matrix(instance, "q"), _matrix(instance, "z"), _matrix(instance, "z_prime")
        T, t = float(_field(instance, "T")), float(_field(instance, "t"))
        Wq = G.build_pseudo_label_graph(q, T)
        Wz = G.build_embedding_graph(z, zp, t)
        if subject == "graph":
            cmp += [
                ("pseudo_label_graph", _dev(Wq, oracles.pseudo_label_graph(q.tolist(), T))),
                ("embedding_graph", _dev(Wz, oracles.embedding_graph(z.tolist(), zp.tolist(), t))),
            ]
        else:
            rows = oracles.graph_cross_entropy_rows(Wq.tolist(), Wz.tolist())
            self_t, peer_t = G.decomposition_check(Wq, Wz)
            cmp += [
                ("contrastive_loss", _dev(G.contrastive_loss(Wq, Wz), oracles.contrastive_loss(Wq.tolist(), Wz.tolist()))),
                ("decomposition_sum_vs_row_ce", _dev(self_t + peer_t, rows)),
            ]
    else:
        raise InvalidArgumentError(f"unknown oracle subject {subject!r}")
    return OracleReport(subject, cmp)


# evaluation of a saved run --------------------------------------------------


def run_eval(checkpoint: str | Path, data_csv: str | Path) -> dict:
    state, hp, _ = load_checkpoint(checkpoint)
    ds = read_dataset_csv(data_csv, "test")
    keep = ds.labels != UNLABELED
    res = evaluate(eval_params(state, hp), ds.features[keep], ds.labels[keep])
    return {
        "accuracy": res.accuracy,
        "per_class_accuracy": [None if math.isnan(v) else float(v) for v in res.per_class],
        "n": int(keep.sum()),
    }
