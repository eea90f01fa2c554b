"""Dense float32 tensors with reverse-mode differentiation on numpy.

The engine covers exactly what iterative sign-gradient attacks, small
classifiers, and a neural MI estimator need: matmul and 2-d convolution,
the usual elementwise ops, categorical losses, a stable log-mean-exp, and
a few shape utilities. Graphs are built implicitly through parent links
and are meant to live for a single optimization step. Payloads are
float32; reductions (dot products, sums, log-sum-exp) accumulate in
float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

_F32 = np.float32
_F64 = np.float64


class Tensor:
    """Dense float32 array plus an optional same-shape gradient slot.

    Tensors double as nodes of an implicit backward graph: every op below
    returns a tensor that remembers its parents and how to push a gradient
    back to them. Treat ``data`` as frozen once a tensor has been consumed
    by an op; reusing a tensor across graphs is fine, mutating it is not.
    """

    __slots__ = ("data", "grad", "_parents", "_vjps")

    def __init__(self, data, _parents=(), _vjps=()):
        self.data: Array = np.asarray(data, dtype=_F32)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._vjps: tuple[Callable[[Array], Array], ...] = _vjps

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> Array:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        kind = "leaf" if not self._parents else "node"
        return f"Tensor(shape={self.shape}, {kind})"

    # Arithmetic sugar; scalars are folded in as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other, like=self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, like=self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=_F32)
    if like is not None and arr.ndim == 0:
        arr = np.full(like.shape, arr, dtype=_F32)
    return Tensor(arr)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor(a.data - b.data, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor(ad * bd, (a, b), (lambda g: g * bd, lambda g: g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c32 = _F32(c)
    return Tensor(a.data * c32, (a,), (lambda g: g * c32,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, (a,), (lambda g: g * mask,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Elementwise clamp to [lo, hi]; gradient passes where the input lies
    inside the (closed) interval and is zero outside."""
    if lo > hi:
        raise ValueError(f"clamp: empty interval [{lo}, {hi}]")
    mask = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return Tensor(out, (a,), (lambda g: g * mask,))


def clip01(a: Tensor) -> Tensor:
    return clamp(a, 0.0, 1.0)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product, float64 accumulation."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents disagree, {a.shape} x {b.shape}")
    a64 = a.data.astype(_F64)
    b64 = b.data.astype(_F64)
    out = (a64 @ b64).astype(_F32)

    def da(g: Array) -> Array:
        return (g.astype(_F64) @ b64.T).astype(_F32)

    def db(g: Array) -> Array:
        return (a64.T @ g.astype(_F64)).astype(_F32)

    return Tensor(out, (a, b), (da, db))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n bias to a vector [n] or to every row of a matrix [B, n]."""
    if bias.data.ndim != 1:
        raise ValueError(f"add_bias: bias must be 1-d, got {bias.shape}")
    if a.data.ndim not in (1, 2) or a.shape[-1] != bias.shape[0]:
        raise ValueError(f"add_bias: shape mismatch {a.shape} vs {bias.shape}")
    batched = a.data.ndim == 2

    def dbias(g: Array) -> Array:
        if batched:
            return g.sum(axis=0, dtype=_F64).astype(_F32)
        return g

    return Tensor(a.data + bias.data, (a, bias), (lambda g: g, dbias))


def _sliding(padded: Array, kh: int, kw: int) -> Array:
    # [B, C, Hp, Wp] -> [B, C, Ho, Wo, kh, kw]
    return np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))


def conv2d_raw(x: Array, kernels: Array, pad: int) -> Array:
    """Non-differentiating 2-d cross-correlation with zero padding.

    ``x`` is [C, H, W] or [B, C, H, W]; ``kernels`` is [F, C, kh, kw]. Also
    reused for gradient smoothing, where no graph is wanted.
    """
    single = x.ndim == 3
    x4 = x[None] if single else x
    if x4.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d: bad ranks {x.shape} and {kernels.shape}")
    _, c, h, w = x4.shape
    f, ck, kh, kw = kernels.shape
    if ck != c:
        raise ValueError(f"conv2d: channel mismatch {x.shape} vs {kernels.shape}")
    if pad < 0:
        raise ValueError("conv2d: pad must be >= 0")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    padded = np.pad(x4.astype(_F64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = _sliding(padded, kh, kw)
    out = np.einsum("bcijuv,fcuv->bfij", win, kernels.astype(_F64), optimize=True)
    return (out[0] if single else out).astype(_F32)


def conv2d(x: Tensor, kernels: Tensor, pad: int, bias: Tensor | None = None) -> Tensor:
    """2-d cross-correlation, differentiable w.r.t. input, kernels, and bias.

    Stride 1, zero padding; output spatial extents are H + 2*pad - kh + 1 by
    W + 2*pad - kw + 1. Input may carry a leading batch axis.
    """
    single = x.data.ndim == 3
    x4 = x.data[None] if single else x.data
    if x4.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError(f"conv2d: bad ranks {x.shape} and {kernels.shape}")
    b, c, h, w = x4.shape
    f, ck, kh, kw = kernels.shape
    if ck != c:
        raise ValueError(f"conv2d: channel mismatch {x.shape} vs {kernels.shape}")
    if pad < 0:
        raise ValueError("conv2d: pad must be >= 0")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {f} filters")

    padded = np.pad(x4.astype(_F64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k64 = kernels.data.astype(_F64)
    win = _sliding(padded, kh, kw)
    out = np.einsum("bcijuv,fcuv->bfij", win, k64, optimize=True)
    ho, wo = out.shape[2], out.shape[3]
    if bias is not None:
        out = out + bias.data.astype(_F64)[:, None, None]
    out32 = (out[0] if single else out).astype(_F32)

    def dk(g: Array) -> Array:
        g4 = (g[None] if single else g).astype(_F64)
        return np.einsum("bfij,bcijuv->fcuv", g4, _sliding(padded, kh, kw), optimize=True).astype(
            _F32
        )

    def dx(g: Array) -> Array:
        g4 = (g[None] if single else g).astype(_F64)
        dpad = np.zeros_like(padded)
        for u in range(kh):
            for v in range(kw):
                dpad[:, :, u : u + ho, v : v + wo] += np.einsum(
                    "bfij,fc->bcij", g4, k64[:, :, u, v], optimize=True
                )
        res = dpad[:, :, pad : pad + h, pad : pad + w]
        return (res[0] if single else res).astype(_F32)

    parents: list[Tensor] = [x, kernels]
    vjps: list[Callable[[Array], Array]] = [dx, dk]
    if bias is not None:

        def dbias(g: Array) -> Array:
            g4 = g[None] if single else g
            return g4.sum(axis=(0, 2, 3), dtype=_F64).astype(_F32)

        parents.append(bias)
        vjps.append(dbias)
    return Tensor(out32, tuple(parents), tuple(vjps))


def translate(x: Tensor, shifts) -> Tensor:
    """Integer translation with zero fill; shape preserved.

    ``shifts`` is a (dy, dx) pair for a [C, H, W] input, or a sequence of B
    pairs for a [B, C, H, W] input. Positive dy moves content down,
    positive dx moves it right. Linear, so the vjp is the reverse shift.
    """
    single = x.data.ndim == 3
    if single:
        pairs = [tuple(shifts)]
        x4 = x.data[None]
    else:
        if x.data.ndim != 4:
            raise ValueError(f"translate: need [C,H,W] or [B,C,H,W], got {x.shape}")
        pairs = [tuple(s) for s in shifts]
        if len(pairs) != x.shape[0]:
            raise ValueError(f"translate: {len(pairs)} shifts for batch of {x.shape[0]}")
        x4 = x.data

    def apply(arr: Array, sign: int) -> Array:
        out = np.zeros_like(arr)
        h, w = arr.shape[-2:]
        for i, (dy, dx) in enumerate(pairs):
            dy, dx = sign * int(dy), sign * int(dx)
            if abs(dy) >= h or abs(dx) >= w:
                continue
            ys_d = slice(max(dy, 0), h + min(dy, 0))
            xs_d = slice(max(dx, 0), w + min(dx, 0))
            ys_s = slice(max(-dy, 0), h + min(-dy, 0))
            xs_s = slice(max(-dx, 0), w + min(-dx, 0))
            out[i, :, ys_d, xs_d] = arr[i, :, ys_s, xs_s]
        return out

    out = apply(x4, 1)

    def dx_(g: Array) -> Array:
        g4 = g[None] if single else g
        res = apply(g4, -1)
        return res[0] if single else res

    return Tensor(out[0] if single else out, (x,), (dx_,))


# ---------------------------------------------------------------------------
# shape utilities


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    old = a.shape
    return Tensor(out, (a,), (lambda g: g.reshape(old),))


def concat(a: Tensor, b: Tensor, axis: int) -> Tensor:
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    na = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def da(g: Array) -> Array:
        return np.take(g, range(na), axis=axis)

    def db(g: Array) -> Array:
        return np.take(g, range(na, g.shape[axis]), axis=axis)

    return Tensor(out, (a, b), (da, db))


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=_F64), dtype=_F32)
    shape = a.shape
    return Tensor(out, (a,), (lambda g: np.broadcast_to(g, shape).astype(_F32),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum(dtype=_F64) / n, dtype=_F32)
    shape = a.shape

    def da(g: Array) -> Array:
        return (np.broadcast_to(g, shape) / _F32(n)).astype(_F32)

    return Tensor(out, (a,), (da,))


def logmeanexp(a: Tensor) -> Tensor:
    """log(mean(exp(a))) over all elements, max-shifted for stability."""
    if a.data.size == 0:
        raise ValueError("logmeanexp: empty input")
    a64 = a.data.astype(_F64).ravel()
    m = a64.max()
    e = np.exp(a64 - m)
    out = np.asarray(np.log(e.sum() / e.size) + m, dtype=_F32)
    w = (e / e.sum()).reshape(a.shape)

    def da(g: Array) -> Array:
        return (g.astype(_F64) * w).astype(_F32)

    return Tensor(out, (a,), (da,))


def _rows_log_softmax(z64: Array) -> Array:
    m = z64.max(axis=-1, keepdims=True)
    s = z64 - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax of a logit vector [n] or matrix [B, n]."""
    if z.data.ndim not in (1, 2) or z.shape[-1] == 0:
        raise ValueError(f"log_softmax: need a nonempty vector or row matrix, got {z.shape}")
    ls = _rows_log_softmax(z.data.astype(_F64))
    sm = np.exp(ls)

    def dz(g: Array) -> Array:
        g64 = g.astype(_F64)
        return (g64 - sm * g64.sum(axis=-1, keepdims=True)).astype(_F32)

    return Tensor(ls.astype(_F32), (z,), (dz,))


def cross_entropy(z: Tensor, label) -> Tensor:
    """Negative log-softmax picked at the label; scalar output.

    For a batch [B, n] with a length-B label array the per-sample losses
    are averaged.
    """
    single = z.data.ndim == 1
    if z.data.ndim not in (1, 2) or z.shape[-1] == 0:
        raise ValueError(f"cross_entropy: bad logits shape {z.shape}")
    z2 = z.data[None] if single else z.data
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if labels.shape != (z2.shape[0],):
        raise ValueError(f"cross_entropy: {labels.shape[0]} labels for {z2.shape[0]} rows")
    n = z2.shape[1]
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"cross_entropy: label out of range [0, {n}): {labels}")
    b = z2.shape[0]
    ls = _rows_log_softmax(z2.astype(_F64))
    out = np.asarray(-ls[np.arange(b), labels].sum() / b, dtype=_F32)
    sm = np.exp(ls)
    onehot = np.zeros_like(sm)
    onehot[np.arange(b), labels] = 1.0

    def dz(g: Array) -> Array:
        d = g.astype(_F64) * (sm - onehot) / b
        return (d[0] if single else d).astype(_F32)

    return Tensor(out, (z,), (dz,))


def kl_categorical(z_p: Tensor, z_q: Tensor) -> Tensor:
    """KL divergence between the categoricals softmax(z_p) and softmax(z_q).

    Differentiable w.r.t. both logit vectors; rows of a [B, n] pair are
    averaged. Always >= 0 up to rounding.
    """
    _same_shape(z_p, z_q, "kl_categorical")
    if z_p.data.ndim not in (1, 2) or z_p.shape[-1] == 0:
        raise ValueError(f"kl_categorical: bad logits shape {z_p.shape}")
    single = z_p.data.ndim == 1
    p2 = z_p.data[None] if single else z_p.data
    q2 = z_q.data[None] if single else z_q.data
    b = p2.shape[0]
    lsp = _rows_log_softmax(p2.astype(_F64))
    lsq = _rows_log_softmax(q2.astype(_F64))
    p = np.exp(lsp)
    q = np.exp(lsq)
    diff = lsp - lsq
    kl_rows = (p * diff).sum(axis=-1)
    out = np.asarray(kl_rows.sum() / b, dtype=_F32)

    def dzp(g: Array) -> Array:
        d = g.astype(_F64) * p * (diff - kl_rows[:, None]) / b
        return (d[0] if single else d).astype(_F32)

    def dzq(g: Array) -> Array:
        d = g.astype(_F64) * (q - p) / b
        return (d[0] if single else d).astype(_F32)

    return Tensor(out, (z_p, z_q), (dzp, dzq))


# ---------------------------------------------------------------------------
# backward pass


def topo_order(root: Tensor) -> list[Tensor]:
    """Every node reachable from ``root``, parents before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


@dataclass
class Graph:
    """Topologically ordered view of the op records reachable from a root."""

    nodes: list[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        return cls(topo_order(root))


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar root."""
    if root.data.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    nodes = topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(nodes):
        if node.grad is None or not node._parents:
            continue
        g = node.grad
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib


def clear_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Outcome of a central-difference check of one scalar function."""

    max_rel_error: float
    worst_coord: tuple[int, ...]
    kink_suspect: bool


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` at ``x`` to central differences.

    Returns the max over coordinates of |analytic - numeric| / max(1,
    |analytic|), plus the offending coordinate. ``kink_suspect`` is set when
    one-sided slopes at that coordinate disagree, which is the signature of
    a clamp or relu boundary inside the h-neighborhood.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    x0 = np.array(x.data, dtype=_F32)
    leaf = Tensor(x0)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    f0 = float(out.data.reshape(()))
    if not np.isfinite(f0):
        raise FloatingPointError("grad_check: f is non-finite at the base point")
    backward(out)
    analytic = (
        leaf.grad.astype(_F64) if leaf.grad is not None else np.zeros(x0.shape, dtype=_F64)
    )

    def eval_at(arr: Array) -> float:
        v = f(Tensor(arr)).data.reshape(())
        return float(v)

    worst_err = 0.0
    worst_idx = (0,) * max(x0.ndim, 1)
    worst_sides = (f0, f0)
    flat = x0.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        fp = eval_at((flat + bump).reshape(x0.shape))
        fm = eval_at((flat - bump).reshape(x0.shape))
        idx = np.unravel_index(i, x0.shape) if x0.ndim else ()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: non-finite evaluation at coordinate {idx}")
        numeric = (fp - fm) / (2 * h)
        a = analytic.ravel()[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        if err >= worst_err:
            worst_err = err
            worst_idx = idx
            worst_sides = (fp, fm)
    fwd = (worst_sides[0] - f0) / h
    bwd = (f0 - worst_sides[1]) / h
    kink = abs(fwd - bwd) > 0.1 * max(1.0, abs(fwd), abs(bwd))
    return GradCheckReport(worst_err, worst_idx, kink)


# ---------------------------------------------------------------------------
# IBT1 serialization

_MAGIC = b"IBT1"


def save_tensor(path, t) -> None:
    """Write an IBT1 file: magic, u8 rank, u32 LE extents, f32 LE payload."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=_F32)
    if arr.ndim > 255:
        raise ValueError("save_tensor: rank exceeds u8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        if arr.ndim:
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 5 or blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not an IBT1 file")
    rank = blob[4]
    head = 5 + 4 * rank
    if len(blob) < head:
        raise ValueError(f"{path}: truncated IBT1 header")
    shape = struct.unpack(f"<{rank}I", blob[5:head]) if rank else ()
    if any(e == 0 for e in shape):
        raise ValueError(f"{path}: zero extent in shape {shape}")
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(blob) != head + 4 * count:
        raise ValueError(
            f"{path}: payload size {len(blob) - head} does not match shape {shape}"
        )
    arr = np.frombuffer(blob, dtype="<f4", offset=head).reshape(shape)
    return Tensor(arr.astype(_F32))
