"""Datasets, experiment protocols, and report generation.

The desk-scale protocol mirrors the usual transfer-attack methodology:
train several small classifiers on the same synthetic image set with
different seeds, craft adversarial examples on one of them (the source),
and measure success rates on the others (the victims). MI measurement
harvests (perturbation, clean input, attack label) triples and feeds them
to the class-conditional DV estimator.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ibta_lab import ibta as ib
from ibta_lab import mine as mi
from ibta_lab import models as mdl
from ibta_lab import tensor as tz
from ibta_lab.attacks import AdvExample, AttackConfig
from ibta_lab.seeding import DATA, TARGETS, seeded_rng
from ibta_lab.tensor import Tensor


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Images in [0, 1] with integer labels."""

    images: Tensor  # [N, C, H, W]
    labels: np.ndarray
    class_count: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.shape[0] != len(self.labels):
            raise ValueError(
                f"{self.images.shape[0]} images vs {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels outside [0, {self.class_count})")
        d = self.images.data
        if d.size and (d.min() < 0 or d.max() > 1):
            raise ValueError("image values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            Tensor(self.images.data[idx]), self.labels[idx], self.class_count, self.provenance
        )

    def split(self, test_per_class: int, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Stratified train/test split, deterministic given seed."""
        rng = seeded_rng(seed, DATA)
        train_idx, test_idx = [], []
        for c in range(self.class_count):
            members = np.where(self.labels == c)[0]
            order = members[rng.permutation(len(members))]
            test_idx.extend(order[:test_per_class])
            train_idx.extend(order[test_per_class:])
        return self.subset(np.sort(train_idx)), self.subset(np.sort(test_idx))


def _blob_image(params, yy, xx, dy=0.0, dx=0.0) -> np.ndarray:
    c = params["amps"].shape[1]
    out = np.full((c,) + yy.shape, 0.5, dtype=np.float64)
    for (cy, cx), s, amps in zip(params["centers"], params["sigmas"], params["amps"]):
        g = np.exp(-(((yy - cy - dy) ** 2) + ((xx - cx - dx) ** 2)) / (2 * s * s))
        out += amps[:, None, None] * g
    return out


def _draw_class_params(rng, c, h, w, blobs=12):
    # many low-amplitude signed blobs around a gray base: class evidence is
    # spread across pixels, so accuracy is easy but L-inf margins stay small
    signs = rng.choice([-1.0, 1.0], size=(blobs, c))
    return {
        "centers": np.column_stack([rng.uniform(0, h, blobs), rng.uniform(0, w, blobs)]),
        "sigmas": rng.uniform(1.5, 3.5, blobs),
        "amps": signs * rng.uniform(0.05, 0.14, (blobs, c)),
    }


def gen_synthetic(
    classes: int,
    per_class: int,
    c: int,
    h: int,
    w: int,
    seed: int,
    noise_std: float = 0.10,
    jitter: float = 1.5,
) -> Dataset:
    """Class-conditional blob images: one spatial Gaussian-mixture template
    per class, plus per-sample noise and sub-pixel jitter, clipped to [0, 1].

    Templates are redrawn until every pair is L2-separated by at least four
    noise standard deviations, which keeps the classes learnable.
    """
    if classes < 1 or per_class < 1 or c < 1 or h < 1 or w < 1:
        raise ValueError("classes, per_class, and extents must be positive")
    rng = seeded_rng(seed, DATA)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    params: list[dict] = []
    templates: list[np.ndarray] = []
    for k in range(classes):
        for attempt in range(200):
            cand = _draw_class_params(rng, c, h, w)
            tmpl = np.clip(_blob_image(cand, yy, xx), 0.0, 1.0)
            if all(
                float(np.linalg.norm(tmpl - t)) >= 4.0 * noise_std for t in templates
            ):
                params.append(cand)
                templates.append(tmpl)
                break
        else:
            raise RuntimeError(f"could not separate class {k} templates")

    images = np.empty((classes * per_class, c, h, w), dtype=np.float32)
    labels = np.empty(classes * per_class, dtype=np.int64)
    i = 0
    for k in range(classes):
        for _ in range(per_class):
            dy, dx = rng.uniform(-jitter, jitter, 2)
            img = _blob_image(params[k], yy, xx, dy, dx)
            img += rng.normal(0.0, noise_std, img.shape)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = k
            i += 1
    prov = {
        "kind": "synthetic",
        "seed": seed,
        "params": {
            "classes": classes, "per_class": per_class, "c": c, "h": h, "w": w,
            "noise_std": noise_std, "jitter": jitter,
        },
    }
    return Dataset(Tensor(images), labels, classes, prov)


def save_dataset(images_path, labels_path, data: Dataset) -> None:
    """One IBT1 tensor for images plus a labels file, one integer per line."""
    tz.save_tensor(images_path, data.images)
    Path(labels_path).write_text("".join(f"{int(v)}\n" for v in data.labels))


def load_dataset(images_path, labels_path, class_count: int | None = None) -> Dataset:
    images = tz.load_tensor(images_path)
    labels = np.array(
        [int(line) for line in Path(labels_path).read_text().split()], dtype=np.int64
    )
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images, labels, class_count, {"kind": "ingested", "path": str(images_path)})


# ---------------------------------------------------------------------------
# model zoo


def train_desk_zoo(
    train_data: Dataset,
    seed: int = 0,
    epochs: int = 25,
    lr: float = 0.02,
    min_disagreement: float = 0.01,
    min_accuracy: float = 0.9,
    stop_at_loss: float | None = None,
) -> dict[str, mdl.ModelParams]:
    """Train the four desk models.

    A model is re-seeded and retrained when it fails to learn (training
    accuracy below ``min_accuracy``) or when it agrees with an earlier
    model on more than 99% of random probe inputs. ``stop_at_loss`` caps
    how confident the models get, mimicking the moderate softmax
    temperatures of large pretrained classifiers.
    """
    archs = mdl.desk_archs(train_data.input_shape, train_data.class_count)
    probe_rng = seeded_rng(seed, DATA, 1)
    probes = probe_rng.uniform(0, 1, (256,) + train_data.input_shape).astype(np.float32)
    zoo: dict[str, mdl.ModelParams] = {}
    for i, (name, arch) in enumerate(archs.items()):
        for attempt in range(8):
            model_seed = seed + 1000 * attempt + i
            cfg = mdl.TrainConfig(
                epochs=epochs, batch_size=32, lr=lr, seed=model_seed,
                stop_at_loss=stop_at_loss,
            )
            model = mdl.train(mdl.init_model(arch, seed=model_seed), train_data, cfg)
            if mdl.accuracy(model, train_data) < min_accuracy:
                continue
            preds = mdl.predict(model, probes)
            if all(
                float(np.mean(preds != mdl.predict(other, probes))) >= min_disagreement
                for other in zoo.values()
            ):
                zoo[name] = model
                break
        else:
            raise RuntimeError(f"could not train a distinct model for {name}")
    return zoo


# ---------------------------------------------------------------------------
# success measurement


def _success_fraction(victim, x_adv, y, y_adv, targeted: bool) -> float:
    pred = mdl.predict(victim, x_adv)
    hits = pred == np.asarray(y_adv) if targeted else pred != np.asarray(y)
    return float(np.mean(hits))


def success_rate(victim: mdl.ModelParams, advs: list[AdvExample], targeted: bool) -> float:
    """Fraction of adversarial examples that fool the victim."""
    if not advs:
        raise ValueError("success_rate: empty list")
    x_adv = np.stack([a.x_adv.data for a in advs])
    y = np.array([a.y for a in advs])
    y_adv = np.array([a.y_adv for a in advs])
    return _success_fraction(victim, x_adv, y, y_adv, targeted)


def draw_targets(labels: np.ndarray, class_count: int, seed: int) -> np.ndarray:
    """Uniform random target != true label, deterministic given seed."""
    rng = seeded_rng(seed, TARGETS)
    offsets = rng.integers(1, class_count, size=len(labels))
    return (np.asarray(labels) + offsets) % class_count


# ---------------------------------------------------------------------------
# transfer protocol


@dataclass
class TransferReport:
    """Success-rate cells keyed by (source, victim, attack, steps)."""

    seeds: list[int]
    per_seed: dict[tuple[str, str, str, int], list[float]]
    cells: dict[tuple[str, str, str, int], float]
    avg_transfer: dict[tuple[str, str, int], float]
    avg_transfer_per_seed: dict[tuple[str, str, int], list[float]]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "victim", "attack", "steps", "mean_rate"] +
                       [f"seed_{s}" for s in self.seeds])
            for key in sorted(self.per_seed):
                src, vic, att, steps = key
                w.writerow([src, vic, att, steps, f"{self.cells[key]:.6f}"] +
                           [f"{v:.6f}" for v in self.per_seed[key]])

    def format_summary(self) -> str:
        lines = ["source         attack            steps  avg transfer (victims w/o source)"]
        for (src, att, steps), v in sorted(self.avg_transfer.items()):
            lines.append(f"{src:<14s} {att:<17s} {steps:<6d} {v:.4f}")
        return "\n".join(lines)


def _transfer_job(args):
    models, src_name, cfg, seed, images, y, y_adv, budgets, targeted = args
    run_cfg = replace(cfg, seed=seed)
    res = ib.craft(models[src_name], images, y_adv, run_cfg, snapshot_steps=budgets)
    out = {}
    for t in budgets:
        x_adv = np.clip(images + res.snapshots[t], 0.0, 1.0)
        for vic_name, victim in models.items():
            out[(src_name, vic_name, cfg.name, t)] = _success_fraction(
                victim, x_adv, y, y_adv, targeted
            )
    return seed, out


def eval_transfer(
    models: dict[str, mdl.ModelParams],
    attack_cfgs: list[AttackConfig],
    data: Dataset,
    step_budgets: list[int],
    seeds: list[int],
    sources: list[str] | None = None,
    workers: int = 1,
) -> TransferReport:
    """Attack the evaluation set on each source; score every model.

    The largest budget is run once per (source, config, seed) and smaller
    budgets are read off the same trajectory, which matches separate runs
    exactly because the step-t perturbation never depends on T.
    """
    if len(models) < 2:
        raise ValueError("eval_transfer: need at least 2 models")
    names = [c.name for c in attack_cfgs]
    if len(set(names)) != len(names):
        raise ValueError(f"attack configs must have distinct names, got {names}")
    budgets = sorted(set(int(b) for b in step_budgets))
    if not budgets or budgets[0] < 1:
        raise ValueError("step budgets must be positive")
    sources = list(models) if sources is None else list(sources)
    images = data.images.data
    y = data.labels

    jobs = []
    for src in sources:
        for cfg in attack_cfgs:
            cfg_run = replace(cfg, steps=budgets[-1])
            for seed in seeds:
                y_adv = (
                    draw_targets(y, data.class_count, seed) if cfg.targeted else y
                )
                jobs.append(
                    (models, src, cfg_run, seed, images, y, y_adv, budgets, cfg.targeted)
                )

    per_seed: dict[tuple[str, str, str, int], list[float]] = {}
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_transfer_job, jobs))
    else:
        results = [_transfer_job(j) for j in jobs]
    for _, cells in results:
        for key, rate in cells.items():
            per_seed.setdefault(key, []).append(rate)

    cells = {k: float(np.mean(v)) for k, v in per_seed.items()}
    avg: dict[tuple[str, str, int], float] = {}
    avg_per_seed: dict[tuple[str, str, int], list[float]] = {}
    for (src, vic, att, steps), rates in per_seed.items():
        if vic == src:
            continue
        key = (src, att, steps)
        avg_per_seed.setdefault(key, [np.zeros(len(seeds)), 0])
        acc = avg_per_seed[key]
        acc[0] = acc[0] + np.asarray(rates)
        acc[1] += 1
    avg_per_seed = {
        k: list(np.asarray(v[0]) / v[1]) for k, v in avg_per_seed.items()
    }
    avg = {k: float(np.mean(v)) for k, v in avg_per_seed.items()}
    return TransferReport(list(seeds), per_seed, cells, avg, avg_per_seed)


# ---------------------------------------------------------------------------
# hyperparameter sweep


_SWEEP_PARAMS = {"lam": "lam", "gamma": "gamma", "sigma": "sigma"}


@dataclass
class SweepResult:
    param: str
    values: list[float]
    reports: dict[float, TransferReport]

    def rate_table(self) -> dict[float, dict[tuple[str, str, int], float]]:
        return {v: dict(self.reports[v].avg_transfer) for v in self.values}

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.param, "source", "attack", "steps", "avg_transfer"])
            for v in self.values:
                for (src, att, steps), rate in sorted(self.reports[v].avg_transfer.items()):
                    w.writerow([v, src, att, steps, f"{rate:.6f}"])


def sweep(
    param: str,
    values: list[float],
    base_cfg: AttackConfig,
    models: dict[str, mdl.ModelParams],
    data: Dataset,
    seeds: list[int],
    step_budgets: list[int] = (20,),
    sources: list[str] | None = None,
    workers: int = 1,
) -> SweepResult:
    """One eval_transfer per value of lam, gamma, or sigma."""
    if param not in _SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {sorted(_SWEEP_PARAMS)}")
    if not values:
        raise ValueError("sweep needs at least one value")
    reports = {}
    for v in values:
        cfg = replace(base_cfg, **{_SWEEP_PARAMS[param]: float(v)})
        reports[float(v)] = eval_transfer(
            models, [cfg], data, step_budgets, seeds, sources=sources, workers=workers
        )
    return SweepResult(param, [float(v) for v in values], reports)


# ---------------------------------------------------------------------------
# MI protocol


@dataclass
class MiComparison:
    attack: str
    ib_attack: str
    targeted: bool
    seed: int
    baseline: mi.MiReport
    with_ib: mi.MiReport

    @property
    def reduced(self) -> bool:
        return self.with_ib.weighted_mean < self.baseline.weighted_mean

    def summary_line(self) -> str:
        mark = "lower" if self.reduced else "HIGHER"
        return (
            f"{self.attack:<10s} vs {self.ib_attack:<15s} "
            f"{'targeted' if self.targeted else 'untargeted':<10s} seed={self.seed} "
            f"{self.baseline.weighted_mean: .4f} -> {self.with_ib.weighted_mean: .4f} ({mark})"
        )


def harvest_triples(
    model: mdl.ModelParams, data: Dataset, cfg: AttackConfig, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Attack the set and return (eps, clean x, attack labels)."""
    images = data.images.data
    y_adv = (
        draw_targets(data.labels, data.class_count, seed) if cfg.targeted else data.labels
    )
    res = ib.craft(model, images, y_adv, replace(cfg, seed=seed))
    return res.eps, images, y_adv


def mi_experiment(
    models: dict[str, mdl.ModelParams],
    cfg_pairs: list[tuple[AttackConfig, AttackConfig]],
    data: Dataset,
    seeds: list[int],
    mine_cfg: mi.MineConfig | None = None,
) -> list[MiComparison]:
    """Side-by-side conditional MI of baseline vs IB-augmented perturbations.

    Attacks run on the first model in ``models`` over ``data`` (the spirit
    of measuring on training inputs); estimator seeds are shared between
    the two arms of a pair so the comparison is paired per class.
    """
    if not models:
        raise ValueError("mi_experiment: empty model list")
    mine_cfg = mine_cfg or mi.MineConfig(train_steps=400, batch=64, lr=1e-3, hidden=64)
    source = next(iter(models.values()))
    out: list[MiComparison] = []
    for base_cfg, ib_cfg in cfg_pairs:
        for seed in seeds:
            eps_b, x_b, y_b = harvest_triples(source, data, base_cfg, seed)
            eps_i, x_i, y_i = harvest_triples(source, data, ib_cfg, seed)
            mcfg = replace(mine_cfg, seed=seed)
            rep_b = mi.conditional_mi(eps_b, x_b, y_b, mcfg)
            rep_i = mi.conditional_mi(eps_i, x_i, y_i, mcfg)
            out.append(
                MiComparison(
                    base_cfg.name, ib_cfg.name, base_cfg.targeted, seed, rep_b, rep_i
                )
            )
    return out
