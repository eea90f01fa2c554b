"""Donsker-Varadhan neural MI estimation and the sample-complexity bound.

The estimator is a small ReLU network T over concatenated (perturbation,
input) pairs, output clamped to [-M, M]. Its Donsker-Varadhan value

    mean_joint[T] - log mean_marginal[exp(T)]

lower-bounds the mutual information; training ascends it with Adam.
Conditioning on the attack label is exact: one estimator per class,
estimates averaged by sample count. Marginal batches permute the inputs
within the dataset (within the class, for the conditional variant) while
keeping the perturbations fixed. The plain DV objective is used; no
moving-average correction of the log-mean-exp gradient bias.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ibta_lab import models as mdl
from ibta_lab import tensor as tz
from ibta_lab.seeding import BATCH, EVAL, FOLDS, seeded_rng
from ibta_lab.tensor import Tensor


@dataclass(frozen=True)
class MineConfig:
    train_steps: int = 1200
    batch: int = 256
    lr: float = 2e-3
    seed: int = 0
    clamp: float = 20.0
    hidden: int = 128
    eval_permutations: int = 16
    folds: int = 2  # cross-fit folds for the conditional estimator
    weight_decay: float = 0.0
    patience: int = 6  # early-stop patience (validation evals) in cross-fit

    def __post_init__(self):
        if self.train_steps < 0 or self.batch < 1 or self.lr <= 0:
            raise ValueError("train_steps >= 0, batch >= 1, lr > 0 required")
        if self.clamp <= 0 or self.hidden < 1 or self.eval_permutations < 1:
            raise ValueError("clamp, hidden, eval_permutations must be positive")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class MineEstimator:
    """Statistics network plus clamp bound and training state."""

    stat_net: mdl.ModelParams
    clamp: float
    config: MineConfig
    train_curve: list[float] = field(default_factory=list)
    estimate: float | None = None

    @property
    def param_norm(self) -> float:
        """L2 norm of all parameters (the K of the sample bound)."""
        return math.sqrt(
            sum(float((w.data.astype(np.float64) ** 2).sum()) for w in self.stat_net.weights)
        )


@dataclass
class MiReport:
    """Per-class conditional MI estimates in nats."""

    per_class: dict[int, float]
    weighted_mean: float
    sample_counts: dict[int, int]
    excluded: dict[int, int] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = ["class  n      I_hat(nats)"]
        for c in sorted(self.per_class):
            lines.append(f"{c:<6d} {self.sample_counts[c]:<6d} {self.per_class[c]: .4f}")
        for c in sorted(self.excluded):
            lines.append(f"{c:<6d} {self.excluded[c]:<6d} (excluded: < 2 samples)")
        lines.append(f"weighted mean: {self.weighted_mean:.4f}")
        return "\n".join(lines)


def _rows(a) -> np.ndarray:
    arr = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float32)
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    return arr.reshape(arr.shape[0], int(np.prod(arr.shape[1:], dtype=np.int64)))


def _t_values(est: MineEstimator, e: np.ndarray, x: np.ndarray) -> Tensor:
    pair = tz.concat(Tensor(e), Tensor(x), axis=1)
    out = mdl.forward(est.stat_net, pair)
    return tz.clamp(tz.reshape(out, (e.shape[0],)), -est.clamp, est.clamp)


def _dv_graph(est: MineEstimator, joint, marginal) -> Tensor:
    ej, xj = joint
    em, xm = marginal
    t_joint = _t_values(est, ej, xj)
    t_marg = _t_values(est, em, xm)
    return tz.sub(tz.mean_all(t_joint), tz.logmeanexp(t_marg))


def dv_estimate(est: MineEstimator, joint, marginal) -> float:
    """Donsker-Varadhan value on explicit joint / marginal pair batches.

    Each batch is a (perturbations, inputs) array pair; rows are flattened.
    Clamped T keeps the value within [-2M, 2M] by construction.
    """
    ej, xj = _rows(joint[0]), _rows(joint[1])
    em, xm = _rows(marginal[0]), _rows(marginal[1])
    if ej.shape[0] == 0 or em.shape[0] == 0:
        raise ValueError("dv_estimate: empty batch")
    if ej.shape[0] != xj.shape[0] or em.shape[0] != xm.shape[0]:
        raise ValueError("dv_estimate: pair batches must align")
    value = _dv_graph(est, (ej, xj), (em, xm)).item()
    assert abs(value) <= 2 * est.clamp + 1e-5
    return value


def _adam_ascent(weights, grads, state, lr, t, weight_decay=0.0):
    b1, b2, eps = 0.9, 0.999, 1e-8
    for w, g, (m, v) in zip(weights, grads, state):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        step = mhat / (np.sqrt(vhat) + eps)
        if weight_decay:
            # decoupled decay; ascent direction, so decay still shrinks w
            w.data = w.data * np.float32(1.0 - lr * weight_decay)
        w.data = w.data + np.float32(lr) * step.astype(np.float32)


def new_estimator(e_dim: int, x_dim: int, cfg: MineConfig) -> MineEstimator:
    arch = mdl.mlp_arch([e_dim + x_dim], [cfg.hidden, cfg.hidden, 1])
    net = mdl.init_model(arch, seed=cfg.seed)
    # zero head: T starts identically 0, so the DV value starts exactly at 0
    net.weights[-2].data = np.zeros_like(net.weights[-2].data)
    net.weights[-1].data = np.zeros_like(net.weights[-1].data)
    return MineEstimator(net, cfg.clamp, cfg)


def final_estimate(est: MineEstimator, e, x, permutations: int | None = None) -> float:
    """DV value on the full dataset, averaged over seeded input permutations."""
    e, x = _rows(e), _rows(x)
    n = e.shape[0]
    reps = permutations or est.config.eval_permutations
    rng = seeded_rng(est.config.seed, EVAL)
    vals = []
    for _ in range(reps):
        perm = rng.permutation(n)
        vals.append(dv_estimate(est, (e, x), (e, x[perm])))
    return float(np.mean(vals))


def train_mine(pairs, cfg: MineConfig) -> MineEstimator:
    """Ascend the DV bound on (perturbation, input) pairs.

    Marginal batches reuse the sampled perturbations against a permutation
    of the sampled inputs. Deterministic given cfg.seed; the returned
    estimator carries the training curve and the final full-data estimate.
    """
    e, x = _rows(pairs[0]), _rows(pairs[1])
    if e.shape[0] != x.shape[0]:
        raise ValueError(f"train_mine: {e.shape[0]} perturbations vs {x.shape[0]} inputs")
    n = e.shape[0]
    if n < 2:
        raise ValueError("train_mine: need at least 2 samples")

    est = new_estimator(e.shape[1], x.shape[1], cfg)
    rng = seeded_rng(cfg.seed, BATCH)
    state = [(np.zeros_like(w.data), np.zeros_like(w.data)) for w in est.stat_net.weights]
    bsz = min(cfg.batch, n)
    for step in range(1, cfg.train_steps + 1):
        idx = rng.integers(0, n, size=bsz)
        perm = rng.permutation(bsz)
        tz.clear_grads(est.stat_net.weights)
        obj = _dv_graph(est, (e[idx], x[idx]), (e[idx], x[idx][perm]))
        val = obj.item()
        if not math.isfinite(val):
            raise RuntimeError(f"train_mine: diverged at step {step}")
        tz.backward(obj)
        grads = [w.grad for w in est.stat_net.weights]
        _adam_ascent(est.stat_net.weights, grads, state, cfg.lr, step, cfg.weight_decay)
        est.train_curve.append(val)
    tz.clear_grads(est.stat_net.weights)
    est.estimate = final_estimate(est, e, x)
    return est


def _fit_and_score(
    e_fit: np.ndarray,
    x_fit: np.ndarray,
    e_hold: np.ndarray,
    x_hold: np.ndarray,
    cfg: MineConfig,
    seed: int,
) -> float:
    """Ascend the DV bound on the fit split, score on the held-out split.

    The held-out value is checked periodically and the best one is kept,
    with early stopping on patience; a memorizing network never gets to
    drag the reported value below what it genuinely generalizes to.
    """
    est = new_estimator(e_fit.shape[1], x_fit.shape[1], replace(cfg, seed=seed))
    rng = seeded_rng(seed, BATCH)
    state = [(np.zeros_like(w.data), np.zeros_like(w.data)) for w in est.stat_net.weights]
    n = e_fit.shape[0]
    bsz = min(cfg.batch, n)
    eval_every = max(10, cfg.train_steps // 40)
    best = final_estimate(est, e_hold, x_hold, permutations=4)
    stale = 0
    for step in range(1, cfg.train_steps + 1):
        idx = rng.integers(0, n, size=bsz)
        perm = rng.permutation(bsz)
        tz.clear_grads(est.stat_net.weights)
        obj = _dv_graph(est, (e_fit[idx], x_fit[idx]), (e_fit[idx], x_fit[idx][perm]))
        if not math.isfinite(obj.item()):
            raise RuntimeError(f"conditional_mi: diverged at step {step}")
        tz.backward(obj)
        grads = [w.grad for w in est.stat_net.weights]
        _adam_ascent(est.stat_net.weights, grads, state, cfg.lr, step, cfg.weight_decay)
        if step % eval_every == 0:
            v = final_estimate(est, e_hold, x_hold, permutations=4)
            if v > best + 1e-4:
                best, stale = v, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return best


def _class_estimate(e: np.ndarray, x: np.ndarray, cfg: MineConfig, class_seed: int) -> float:
    """Cross-fit DV estimate: train on k-1 folds, score the held-out fold.

    Scoring on unseen pairs keeps the lower-bound character at small n,
    where a statistics network happily memorizes its training pairs.
    """
    n = e.shape[0]
    k = min(cfg.folds, n // 2) if n >= 4 else 1
    order = seeded_rng(class_seed, FOLDS).permutation(n)
    if k < 2:
        # too few samples to hold anything out; score the training pairs
        return train_mine((e, x), replace(cfg, seed=class_seed)).estimate
    vals = []
    folds = np.array_split(order, k)
    for j, hold in enumerate(folds):
        fit = np.concatenate([f for i, f in enumerate(folds) if i != j])
        fold_seed = int(seeded_rng(class_seed, j).integers(0, 2**63))
        vals.append(_fit_and_score(e[fit], x[fit], e[hold], x[hold], cfg, fold_seed))
    return float(np.mean(vals))


def conditional_mi(eps_set, x_set, y_set, cfg: MineConfig) -> MiReport:
    """Class-conditional MI: one cross-fit estimator per label,
    count-weighted mean.

    Classes with fewer than 2 samples are excluded and reported. Seeds
    derive from (cfg.seed, class), so two perturbation sets measured with
    the same config share initializations and fold splits class by class.
    """
    e, x = _rows(eps_set), _rows(x_set)
    y = np.asarray(y_set, dtype=np.int64)
    if not (e.shape[0] == x.shape[0] == y.shape[0]):
        raise ValueError("conditional_mi: eps, x, y must have equal length")
    per_class: dict[int, float] = {}
    counts: dict[int, int] = {}
    excluded: dict[int, int] = {}
    for c in sorted(set(int(v) for v in y)):
        mask = y == c
        n_c = int(mask.sum())
        if n_c < 2:
            excluded[c] = n_c
            continue
        class_seed = int(seeded_rng(cfg.seed, c).integers(0, 2**63))
        per_class[c] = _class_estimate(e[mask], x[mask], cfg, class_seed)
        counts[c] = n_c
    if not per_class:
        raise ValueError("conditional_mi: no class had >= 2 samples")
    total = sum(counts.values())
    weighted = sum(counts[c] / total * per_class[c] for c in per_class)
    return MiReport(per_class, float(weighted), counts, excluded)


def sample_bound(M: float, d: float, K: float, L: float, xi: float, delta: float) -> int:
    """Samples needed for accuracy xi at confidence 1 - delta.

    Smallest integer n with n >= 2 M^2 (d log(16 K L sqrt(d) / xi) + 2 d M
    + log(2 / delta)) / xi^2. Pure arithmetic.
    """
    for name, v in (("M", M), ("d", d), ("K", K), ("L", L), ("xi", xi), ("delta", delta)):
        if v <= 0:
            raise ValueError(f"sample_bound: {name} must be positive, got {v}")
    arg = 16.0 * K * L * math.sqrt(d) / xi
    if arg <= 1.0:
        raise ValueError(f"sample_bound: 16*K*L*sqrt(d)/xi must exceed 1, got {arg}")
    rhs = 2.0 * M * M * (d * math.log(arg) + 2.0 * d * M + math.log(2.0 / delta)) / (xi * xi)
    return max(1, math.ceil(rhs))


# ---------------------------------------------------------------------------
# persistence (model-bundle format plus a small sidecar)


def save_estimator(est: MineEstimator, path) -> None:
    d = Path(path)
    mdl.save_model(est.stat_net, d)
    meta = {
        "clamp": est.clamp,
        "config": est.config.__dict__,
        "estimate": est.estimate,
        "train_curve": est.train_curve,
    }
    (d / "mine.json").write_text(json.dumps(meta, indent=1))


def load_estimator(path) -> MineEstimator:
    d = Path(path)
    meta = json.loads((d / "mine.json").read_text())
    cfg = MineConfig(**meta["config"])
    est = MineEstimator(mdl.load_model(d), meta["clamp"], cfg)
    est.estimate = meta["estimate"]
    est.train_curve = meta["train_curve"]
    return est
