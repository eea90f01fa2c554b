"""Small ReLU classifiers: definition, training, evaluation, persistence.

Two architecture families, both bias-carrying and batch-norm free:

* ``mlp`` - fully connected stack over the flattened input.
* ``cnn`` - stride-1 zero-padded conv stack followed by a dense head.

Weight layout is a flat list alternating weight and bias per layer, conv
layers first. Bundles on disk are a directory with ``arch.json`` plus one
IBT1 file per weight tensor (``w0.ibt1``, ``w1.ibt1``, ...).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ibta_lab import tensor as tz
from ibta_lab.seeding import INIT, TRAIN, seeded_rng
from ibta_lab.tensor import Tensor


def mlp_arch(input_shape, widths) -> dict:
    """Fully connected arch over the flattened input; widths exclude the input."""
    return {
        "kind": "mlp",
        "input_shape": [int(v) for v in input_shape],
        "widths": [int(v) for v in widths],
    }


def cnn_arch(input_shape, convs, head) -> dict:
    """Conv stack plus dense head.

    ``convs`` is a list of (filters, kernel, pad) triples; ``head`` lists the
    dense widths after flattening, ending in the class count.
    """
    return {
        "kind": "cnn",
        "input_shape": [int(v) for v in input_shape],
        "convs": [[int(a), int(b), int(c)] for a, b, c in convs],
        "head": [int(v) for v in head],
    }


def desk_archs(input_shape, class_count: int) -> dict[str, dict]:
    """The four desk-scale stand-ins used by the transfer experiments.

    Capacity and receptive-field variety (depths, widths, kernel sizes)
    mimics the architecture variety of the usual pretrained families.
    """
    return {
        "mlp2": mlp_arch(input_shape, [96, 48, class_count]),
        "mlp3": mlp_arch(input_shape, [96, 64, 48, class_count]),
        "cnn-a": cnn_arch(input_shape, [(8, 3, 1), (12, 3, 1)], [48, class_count]),
        "cnn-b": cnn_arch(input_shape, [(8, 5, 2), (10, 3, 1), (12, 3, 1)], [48, class_count]),
    }


def _layer_shapes(arch: dict) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
    """(weight, bias) shape pairs, in weight-list order."""
    shapes = []
    if arch["kind"] == "mlp":
        fan_in = int(np.prod(arch["input_shape"]))
        for w in arch["widths"]:
            shapes.append(((fan_in, w), (w,)))
            fan_in = w
    elif arch["kind"] == "cnn":
        c, h, w = arch["input_shape"]
        for f, k, pad in arch["convs"]:
            shapes.append(((f, c, k, k), (f,)))
            h = h + 2 * pad - k + 1
            w = w + 2 * pad - k + 1
            c = f
        fan_in = c * h * w
        for width in arch["head"]:
            shapes.append(((fan_in, width), (width,)))
            fan_in = width
    else:
        raise ValueError(f"unknown arch kind {arch['kind']!r}")
    return shapes


def _class_count(arch: dict) -> int:
    return arch["widths"][-1] if arch["kind"] == "mlp" else arch["head"][-1]


@dataclass
class ModelParams:
    """Layered weight set; ``weights`` alternates W and b per layer."""

    arch: dict
    weights: list[Tensor]
    class_count: int
    train_loss: list[float] | None = None

    def __post_init__(self):
        expected = _layer_shapes(self.arch)
        got = [t.shape for t in self.weights]
        want = [s for pair in expected for s in pair]
        if got != want:
            raise ValueError(f"weights {got} do not compose with arch (want {want})")
        for t in self.weights:
            if not np.isfinite(t.data).all():
                raise ValueError("non-finite weight tensor")
        if self.class_count != _class_count(self.arch):
            raise ValueError(
                f"class_count {self.class_count} != arch output {_class_count(self.arch)}"
            )

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.arch,
            [Tensor(t.data.copy()) for t in self.weights],
            self.class_count,
            None if self.train_loss is None else list(self.train_loss),
        )


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 0.05
    optimizer: str = "sgd_momentum"  # "sgd" or "sgd_momentum"
    momentum: float = 0.9
    seed: int = 0
    stop_at_loss: float | None = None  # early stop once epoch loss dips below

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ValueError("epochs must be >= 0, batch_size and lr positive")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.stop_at_loss is not None and self.stop_at_loss <= 0:
            raise ValueError("stop_at_loss must be positive when set")


def init_model(arch: dict, seed: int = 0) -> ModelParams:
    """He-initialized weights, zero biases; deterministic given seed."""
    rng = seeded_rng(seed, INIT)
    weights: list[Tensor] = []
    for wshape, bshape in _layer_shapes(arch):
        fan_in = int(np.prod(wshape[1:])) if len(wshape) == 4 else wshape[0]
        std = math.sqrt(2.0 / fan_in)
        weights.append(Tensor(rng.normal(0.0, std, wshape).astype(np.float32)))
        weights.append(Tensor(np.zeros(bshape, dtype=np.float32)))
    return ModelParams(arch, weights, _class_count(arch))


def forward(m: ModelParams, x) -> Tensor:
    """Logits for one input or a batch; differentiable w.r.t. x and weights.

    Accepts a flat vector, a [C, H, W] image, or either with a leading batch
    axis. The output is [class_count] for single inputs and
    [B, class_count] for batches.
    """
    t = x if isinstance(x, Tensor) else Tensor(x)
    in_shape = tuple(m.arch["input_shape"])
    flat = int(np.prod(in_shape))
    if t.shape == in_shape or t.shape == (flat,):
        single = True
        batch = 1
    elif len(t.shape) >= 2 and (t.shape[1:] == in_shape or t.shape[1:] == (flat,)):
        single = False
        batch = t.shape[0]
    else:
        raise ValueError(f"input shape {t.shape} does not match arch input {in_shape}")

    if m.arch["kind"] == "mlp":
        h = tz.reshape(t, (batch, flat))
        widths = m.arch["widths"]
        for i in range(len(widths)):
            h = tz.add_bias(tz.matmul(h, m.weights[2 * i]), m.weights[2 * i + 1])
            if i < len(widths) - 1:
                h = tz.relu(h)
        out = h
    else:
        h = tz.reshape(t, (batch,) + in_shape)
        n_conv = len(m.arch["convs"])
        for i, (_, _, pad) in enumerate(m.arch["convs"]):
            h = tz.relu(tz.conv2d(h, m.weights[2 * i], pad, bias=m.weights[2 * i + 1]))
        h = tz.reshape(h, (batch, int(np.prod(h.shape[1:]))))
        head = m.arch["head"]
        for j in range(len(head)):
            k = n_conv + j
            h = tz.add_bias(tz.matmul(h, m.weights[2 * k]), m.weights[2 * k + 1])
            if j < len(head) - 1:
                h = tz.relu(h)
        out = h
    return tz.reshape(out, (m.class_count,)) if single else out


def logits(m: ModelParams, x) -> np.ndarray:
    """Plain-array logits; no gradients kept."""
    return forward(m, x).data


def predict(m: ModelParams, x) -> np.ndarray:
    """Argmax class indices; ties resolve to the lowest index."""
    z = logits(m, x)
    return np.argmax(z, axis=-1)


def train(m: ModelParams, data, cfg: TrainConfig) -> ModelParams:
    """Minibatch SGD on mean cross-entropy; functional, seeded, loss-recorded.

    ``data`` needs ``images`` (Tensor or array, [N, ...]) and ``labels``.
    Raises on empty data, out-of-range labels, or a non-finite epoch loss.
    """
    images = data.images.data if isinstance(data.images, Tensor) else np.asarray(data.images)
    labels = np.asarray(data.labels, dtype=np.int64)
    n = images.shape[0]
    if n == 0:
        raise ValueError("train: empty dataset")
    if labels.min() < 0 or labels.max() >= m.class_count:
        raise ValueError(f"train: labels outside [0, {m.class_count})")

    out = m.copy()
    if cfg.epochs == 0:
        out.train_loss = []
        return out
    rng = seeded_rng(cfg.seed, TRAIN)
    velocity = [np.zeros_like(w.data) for w in out.weights]
    history: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            tz.clear_grads(out.weights)
            loss = tz.cross_entropy(forward(out, images[idx]), labels[idx])
            tz.backward(loss)
            total += loss.item() * len(idx)
            for k, w in enumerate(out.weights):
                g = w.grad
                if cfg.optimizer == "sgd_momentum":
                    velocity[k] = cfg.momentum * velocity[k] + g
                    g = velocity[k]
                w.data = w.data - np.float32(cfg.lr) * g
        epoch_loss = total / n
        if not math.isfinite(epoch_loss):
            raise RuntimeError(f"train: diverged (non-finite loss) at epoch {epoch}")
        history.append(epoch_loss)
        if cfg.stop_at_loss is not None and epoch_loss <= cfg.stop_at_loss:
            break
    tz.clear_grads(out.weights)
    out.train_loss = history
    return out


def accuracy(m: ModelParams, data) -> float:
    images = data.images.data if isinstance(data.images, Tensor) else np.asarray(data.images)
    labels = np.asarray(data.labels, dtype=np.int64)
    if images.shape[0] == 0:
        raise ValueError("accuracy: empty dataset")
    return float(np.mean(predict(m, images) == labels))


# ---------------------------------------------------------------------------
# persistence


def save_model(m: ModelParams, path) -> None:
    """Write a model bundle directory: arch.json + w0.ibt1, w1.ibt1, ..."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    (d / "arch.json").write_text(json.dumps(m.arch, indent=1))
    for i, w in enumerate(m.weights):
        tz.save_tensor(d / f"w{i}.ibt1", w)


def load_model(path) -> ModelParams:
    d = Path(path)
    arch_file = d / "arch.json"
    if not arch_file.is_file():
        raise ValueError(f"{d}: missing arch.json")
    arch = json.loads(arch_file.read_text())
    shapes = _layer_shapes(arch)
    weights = []
    for i in range(2 * len(shapes)):
        f = d / f"w{i}.ibt1"
        if not f.is_file():
            raise ValueError(f"{d}: missing weight file w{i}.ibt1")
        weights.append(tz.load_tensor(f))
    # ModelParams validates tensor shapes against the descriptor
    return ModelParams(arch, weights, _class_count(arch))
