"""Iterative sign-gradient transfer attacks: MIM, TIM, DIM, and combinations.

All attacks share one loop: forward the current adversarial image, descend
the signed classification loss, optionally smooth the gradient (TIM) and
accumulate momentum (MIM), then project the perturbation onto the L-inf
ball and re-clip the image to [0, 1]. Budgets live on the [0, 1] pixel
scale, so the usual "r = 16, alpha = 2" reads 16/255 and 2/255 here.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ibta_lab import models as mdl
from ibta_lab import tensor as tz
from ibta_lab.seeding import DIM, seeded_rng
from ibta_lab.tensor import Tensor

_KNOWN_TOKENS = {"mim", "tim", "dim"}


@dataclass(frozen=True)
class AttackConfig:
    """All attack knobs; see module docstring for budget units."""

    r: float = 16 / 255
    alpha: float = 2 / 255
    steps: int = 20
    targeted: bool = False
    baseline: str = "mim"  # '+'-joined tokens from {mim, tim, dim}; '' for plain
    mu: float = 0.1
    p: float = 0.7
    kernel_len: int = 7
    lam: float = 0.1
    gamma: float = 0.1
    sigma: float = 0.1
    ib: bool = False
    seed: int = 0
    dim_resample: bool = True
    smooth_before_momentum: bool = True

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("r must be positive")
        if not 0 < self.alpha <= self.r:
            raise ValueError("alpha must satisfy 0 < alpha <= r")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kernel_len < 1 or self.kernel_len % 2 == 0:
            raise ValueError("kernel_len must be odd and positive")
        if not 0 <= self.p <= 1:
            raise ValueError("p must lie in [0, 1]")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        self.tokens()  # validates the baseline string

    def tokens(self) -> frozenset[str]:
        toks = [t for t in self.baseline.lower().split("+") if t]
        bad = set(toks) - _KNOWN_TOKENS
        if bad:
            raise ValueError(f"unknown baseline tokens {sorted(bad)}; use {sorted(_KNOWN_TOKENS)}")
        return frozenset(toks)

    @property
    def delta_tar(self) -> float:
        return 1.0 if self.targeted else -1.0

    @property
    def name(self) -> str:
        base = "+".join(t.upper() for t in ("mim", "tim", "dim") if t in self.tokens()) or "PGD"
        return base + ("+IBTA" if self.ib else "")

    def sha256(self) -> str:
        return hashlib.sha256(
            json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        ).hexdigest()


@dataclass
class AdvExample:
    """One attack result; ``x_adv`` is always clip(x + eps)."""

    x: Tensor
    eps: Tensor
    x_adv: Tensor
    y: int
    y_adv: int
    loss_trace: list[float]
    success: bool
    config: AttackConfig
    x_tilde: Tensor | None = None
    eta: Tensor | None = None
    kl_trace: list[float] | None = None

    def __post_init__(self):
        if float(np.abs(self.eps.data).max()) > self.config.r + 1e-6:
            raise ValueError("perturbation exceeds the L-inf budget")
        xa = self.x_adv.data
        if xa.min() < 0 or xa.max() > 1:
            raise ValueError("x_adv leaves [0, 1]")
        if not np.array_equal(xa, np.clip(self.x.data + self.eps.data, 0.0, 1.0)):
            raise ValueError("x_adv != clip(x + eps)")


# ---------------------------------------------------------------------------
# shared machinery


def project_linf(eps: Tensor, r: float) -> Tensor:
    """Clamp the perturbation to the L-inf ball of radius r; idempotent."""
    if r <= 0:
        raise ValueError("r must be positive")
    return tz.clamp(eps, -r, r)


def clip_unit(x: Tensor) -> Tensor:
    """Clamp pixels to [0, 1]."""
    return tz.clip01(x)


def mim_direction(g: Tensor, state: Tensor, mu: float) -> tuple[Tensor, Tensor]:
    """Momentum accumulation of the L1-normalized gradient, then sign.

    A zero gradient decays the state and yields an all-zero direction.
    """
    if g.shape != state.shape:
        raise ValueError(f"mim_direction: shape mismatch {g.shape} vs {state.shape}")
    norm = float(np.abs(g.data).sum(dtype=np.float64))
    if norm == 0.0:
        new_state = state.data * np.float32(mu)
        return Tensor(np.zeros_like(g.data)), Tensor(new_state)
    new_state = np.float32(mu) * state.data + g.data / np.float32(norm)
    return Tensor(np.sign(new_state)), Tensor(new_state)


def _mim_step_batch(g: np.ndarray, state: np.ndarray, mu: float) -> tuple[np.ndarray, np.ndarray]:
    # per-sample L1 norms over the non-batch axes
    axes = tuple(range(1, g.ndim))
    norms = np.abs(g).sum(axis=axes, dtype=np.float64).astype(np.float32)
    dead = norms == 0
    safe = np.where(dead, 1.0, norms).reshape((-1,) + (1,) * (g.ndim - 1))
    new_state = np.float32(mu) * state + g / safe
    new_state[dead] = np.float32(mu) * state[dead]
    direction = np.sign(new_state)
    direction[dead] = 0.0
    return direction, new_state


def gaussian_kernel(kernel_len: int) -> np.ndarray:
    """Sum-1 truncated Gaussian of side kernel_len (density sampled on
    a +-3 sigma grid, the usual translation-invariance construction)."""
    if kernel_len < 1 or kernel_len % 2 == 0:
        raise ValueError("kernel_len must be odd and positive")
    if kernel_len == 1:
        return np.ones((1, 1), dtype=np.float32)
    xs = np.linspace(-3.0, 3.0, kernel_len)
    k1 = np.exp(-0.5 * xs * xs)
    k2 = np.outer(k1, k1)
    return (k2 / k2.sum()).astype(np.float32)


def _smooth_batch(g: np.ndarray, kernel_len: int) -> np.ndarray:
    # depthwise conv: one Gaussian per channel, zero cross terms
    c = g.shape[-3]
    kern = gaussian_kernel(kernel_len)
    kernels = np.zeros((c, c, kernel_len, kernel_len), dtype=np.float32)
    for i in range(c):
        kernels[i, i] = kern
    return tz.conv2d_raw(g, kernels, pad=(kernel_len - 1) // 2)


def tim_smooth(g: Tensor, kernel_len: int) -> Tensor:
    """Per-channel Gaussian smoothing of a detached gradient; shape kept."""
    if g.data.ndim != 3:
        raise ValueError(f"tim_smooth: expected [C, H, W], got {g.shape}")
    return Tensor(_smooth_batch(g.data[None], kernel_len)[0])


def _draw_shift(rng: np.random.Generator, p: float, h: int, w: int) -> tuple[int, int]:
    if rng.random() >= p:
        return (0, 0)
    sy, sx = h // 8, w // 8
    return (int(rng.integers(-sy, sy + 1)), int(rng.integers(-sx, sx + 1)))


def dim_transform(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """With probability p, a random integer translation with zero fill.

    The translation is uniform in [-floor(H/8), floor(H/8)] per axis and is
    part of the graph, so gradients flow back through it.
    """
    if not 0 <= p <= 1:
        raise ValueError("p must lie in [0, 1]")
    if x.data.ndim != 3:
        raise ValueError(f"dim_transform: expected [C, H, W], got {x.shape}")
    h, w = x.shape[-2:]
    return tz.translate(x, _draw_shift(rng, p, h, w))


# ---------------------------------------------------------------------------
# the attack loop


@dataclass
class BatchAttackResult:
    """Raw arrays from one batched attack run."""

    x: np.ndarray
    y_adv: np.ndarray
    eps: np.ndarray
    snapshots: dict[int, np.ndarray]
    cls_trace: np.ndarray  # [T, B] per-step classification loss
    kl_trace: np.ndarray | None  # [T, B] per-step KL(z || z_tilde)
    eps_trace: list[np.ndarray] | None
    x_tilde: np.ndarray | None
    eta: np.ndarray | None

    @property
    def x_adv(self) -> np.ndarray:
        return np.clip(self.x + self.eps, 0.0, 1.0)


def _ce_rows(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    ls = tz._rows_log_softmax(z.astype(np.float64))
    return -ls[np.arange(z.shape[0]), labels]


def _kl_rows(zp: np.ndarray, zq: np.ndarray) -> np.ndarray:
    lsp = tz._rows_log_softmax(zp.astype(np.float64))
    lsq = tz._rows_log_softmax(zq.astype(np.float64))
    return (np.exp(lsp) * (lsp - lsq)).sum(axis=-1)


def _iterate(
    model: mdl.ModelParams,
    x: np.ndarray,
    y_adv: np.ndarray,
    cfg: AttackConfig,
    x_tilde: np.ndarray | None = None,
    eta: np.ndarray | None = None,
    loss_fn: Callable[[Tensor, Tensor | None], Tensor] | None = None,
    snapshot_steps=None,
    record_eps: bool = False,
) -> BatchAttackResult:
    """Run the projected sign-gradient loop on a batch.

    ``x`` is [B, C, H, W] in [0, 1]. When ``x_tilde`` is given a second
    branch shares the perturbation and any input-diversity draw, and
    ``loss_fn(z, z_tilde)`` supplies the objective; otherwise the objective
    is the signed classification loss. Deterministic given cfg.seed.
    """
    if x.ndim != 4:
        raise ValueError(f"attack input must be [B, C, H, W], got {x.shape}")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("attack input must lie in [0, 1]")
    b, _, h, w = x.shape
    y_adv = np.asarray(y_adv, dtype=np.int64)
    if y_adv.shape != (b,):
        raise ValueError(f"{y_adv.shape[0] if y_adv.ndim else 1} labels for batch of {b}")
    if y_adv.min() < 0 or y_adv.max() >= model.class_count:
        raise ValueError(f"attack label outside [0, {model.class_count})")

    tokens = cfg.tokens()
    use_mim, use_tim, use_dim = "mim" in tokens, "tim" in tokens, "dim" in tokens
    snaps = sorted(set(snapshot_steps or ()))
    if snaps and (snaps[0] < 1 or snaps[-1] > cfg.steps):
        raise ValueError(f"snapshot steps {snaps} outside 1..{cfg.steps}")

    r32, a32 = np.float32(cfg.r), np.float32(cfg.alpha)
    eps = np.zeros_like(x)
    mom = np.zeros_like(x)
    dim_rngs = [seeded_rng(cfg.seed, DIM, i) for i in range(b)] if use_dim else None
    shifts: list[tuple[int, int]] | None = None

    cls_trace = np.zeros((cfg.steps, b))
    kl_trace = np.zeros((cfg.steps, b)) if x_tilde is not None else None
    eps_trace: list[np.ndarray] | None = [] if record_eps else None
    snapshots: dict[int, np.ndarray] = {}

    for t in range(1, cfg.steps + 1):
        eps_leaf = Tensor(eps)
        x_adv = tz.clip01(tz.add(Tensor(x), eps_leaf))
        if use_dim and (cfg.dim_resample or shifts is None):
            shifts = [_draw_shift(g, cfg.p, h, w) for g in dim_rngs]
        branch = tz.translate(x_adv, shifts) if use_dim else x_adv
        z = mdl.forward(model, branch)

        if x_tilde is None:
            loss = tz.scale(tz.cross_entropy(z, y_adv), cfg.delta_tar)
            zt = None
        else:
            xt_adv = tz.clip01(tz.add(Tensor(x_tilde), eps_leaf))
            branch_t = tz.translate(xt_adv, shifts) if use_dim else xt_adv
            zt = mdl.forward(model, branch_t)
            loss = loss_fn(z, zt)

        if not math.isfinite(loss.item()):
            raise RuntimeError(f"attack aborted: non-finite loss at step {t}")
        tz.backward(loss)
        g = eps_leaf.grad
        tz.clear_grads(model.weights)

        cls_trace[t - 1] = _ce_rows(z.data, y_adv)
        if zt is not None:
            kl_trace[t - 1] = _kl_rows(z.data, zt.data)

        if use_tim and cfg.smooth_before_momentum:
            g = _smooth_batch(g, cfg.kernel_len)
        if use_mim:
            direction, mom = _mim_step_batch(g, mom, cfg.mu)
            if use_tim and not cfg.smooth_before_momentum:
                # alternate order: smooth the momentum state, keep dead rows dead
                dead = ~direction.reshape(b, -1).any(axis=1)
                direction = np.sign(_smooth_batch(mom, cfg.kernel_len))
                direction[dead] = 0.0
        else:
            if use_tim and not cfg.smooth_before_momentum:
                g = _smooth_batch(g, cfg.kernel_len)
            direction = np.sign(g)

        eps = np.clip(eps - a32 * direction, -r32, r32)
        # loop invariants from the dual-clipping scheme
        if float(np.abs(eps).max()) > cfg.r + 1e-6:
            raise RuntimeError(f"budget invariant violated at step {t}")
        x_now = np.clip(x + eps, 0.0, 1.0)
        if x_now.min() < 0 or x_now.max() > 1:
            raise RuntimeError(f"pixel-range invariant violated at step {t}")

        if record_eps:
            eps_trace.append(eps.copy())
        if t in snaps:
            snapshots[t] = eps.copy()

    return BatchAttackResult(
        x=x,
        y_adv=y_adv,
        eps=eps,
        snapshots=snapshots,
        cls_trace=cls_trace,
        kl_trace=kl_trace,
        eps_trace=eps_trace,
        x_tilde=x_tilde,
        eta=eta,
    )


def _success(model: mdl.ModelParams, x_adv: np.ndarray, y, y_adv, targeted: bool) -> np.ndarray:
    pred = mdl.predict(model, x_adv)
    return pred == np.asarray(y_adv) if targeted else pred != np.asarray(y)


def run_attack(
    model: mdl.ModelParams,
    x,
    y_adv: int,
    cfg: AttackConfig,
    y_true: int | None = None,
) -> AdvExample:
    """Baseline attack on a single [C, H, W] input.

    ``y_adv`` is the true label in the untargeted setting and the target
    class otherwise; pass ``y_true`` for bookkeeping in the targeted case.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    res = _iterate(model, arr[None], np.array([y_adv]), cfg)
    return _to_example(model, res, cfg, 0, y_true=y_true)


def _to_example(
    model: mdl.ModelParams,
    res: BatchAttackResult,
    cfg: AttackConfig,
    i: int,
    y_true: int | None = None,
) -> AdvExample:
    x_i = res.x[i]
    eps_i = res.eps[i]
    x_adv = np.clip(x_i + eps_i, 0.0, 1.0)
    y = int(res.y_adv[i]) if y_true is None else int(y_true)
    ok = bool(_success(model, x_adv[None], [y], [res.y_adv[i]], cfg.targeted)[0])
    return AdvExample(
        x=Tensor(x_i),
        eps=Tensor(eps_i),
        x_adv=Tensor(x_adv),
        y=y,
        y_adv=int(res.y_adv[i]),
        loss_trace=[float(v) for v in res.cls_trace[:, i]],
        success=ok,
        config=cfg,
        x_tilde=None if res.x_tilde is None else Tensor(res.x_tilde[i]),
        eta=None if res.eta is None else Tensor(res.eta[i]),
        kl_trace=None if res.kl_trace is None else [float(v) for v in res.kl_trace[:, i]],
    )


def attack_batch(
    model: mdl.ModelParams,
    images: np.ndarray,
    y_adv: np.ndarray,
    cfg: AttackConfig,
    snapshot_steps=None,
    record_eps: bool = False,
) -> BatchAttackResult:
    """Baseline attack over a whole image batch; see ``_iterate``."""
    return _iterate(
        model, np.asarray(images, dtype=np.float32), y_adv, cfg,
        snapshot_steps=snapshot_steps, record_eps=record_eps,
    )


# ---------------------------------------------------------------------------
# persistence


def save_adv_example(path, adv: AdvExample) -> None:
    """Write x.ibt1 + eps.ibt1 (+ eta.ibt1) and a meta.json sidecar."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    tz.save_tensor(d / "x.ibt1", adv.x)
    tz.save_tensor(d / "eps.ibt1", adv.eps)
    meta = {
        "y": adv.y,
        "y_adv": adv.y_adv,
        "success": adv.success,
        "config": dataclasses.asdict(adv.config),
        "config_sha256": adv.config.sha256(),
        "loss_trace": adv.loss_trace,
        "kl_trace": adv.kl_trace,
        "eta_file": None,
    }
    if adv.eta is not None:
        tz.save_tensor(d / "eta.ibt1", adv.eta)
        meta["eta_file"] = "eta.ibt1"
        meta["ib_params"] = {
            "lam": adv.config.lam,
            "gamma": adv.config.gamma,
            "sigma": adv.config.sigma,
        }
    (d / "meta.json").write_text(json.dumps(meta, indent=1))


def load_adv_example(path) -> AdvExample:
    d = Path(path)
    meta = json.loads((d / "meta.json").read_text())
    cfg = AttackConfig(**meta["config"])
    if cfg.sha256() != meta["config_sha256"]:
        raise ValueError(f"{d}: config hash mismatch")
    x = tz.load_tensor(d / "x.ibt1")
    eps = tz.load_tensor(d / "eps.ibt1")
    eta = tz.load_tensor(d / meta["eta_file"]) if meta.get("eta_file") else None
    x_tilde = None
    if eta is not None:
        x_tilde = Tensor(np.clip(x.data + eta.data, 0.0, 1.0))
    return AdvExample(
        x=x,
        eps=eps,
        x_adv=Tensor(np.clip(x.data + eps.data, 0.0, 1.0)),
        y=meta["y"],
        y_adv=meta["y_adv"],
        loss_trace=meta["loss_trace"],
        success=meta["success"],
        config=cfg,
        x_tilde=x_tilde,
        eta=eta,
        kl_trace=meta.get("kl_trace"),
    )
