"""Dense float64 tensors with reverse-mode differentiation on a global tape.

Everything here is deliberately small: the handful of operations the encoders
and contrastive losses need, a Wengert-list tape, a finite-difference gradient
checker, and Adam. All storage is numpy float64; gradients are exact
accumulation in creation order, so results are bitwise deterministic.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Tensor",
    "tensor",
    "parameter",
    "add",
    "mul",
    "div",
    "matmul",
    "scale",
    "relu",
    "concat",
    "reshape",
    "permute",
    "mean_pool",
    "gather_rows",
    "logsumexp",
    "softmax",
    "l2_normalize",
    "cosine_similarity_matrix",
    "info_nce",
    "backward",
    "reset_tape",
    "tape_size",
    "no_grad",
    "set_debug_checks",
    "check_gradients",
    "Adam",
]


class AutodiffError(RuntimeError):
    """Raised for tape misuse or numerically invalid states."""


class ShapeError(AutodiffError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf detection after every op (fatal on detection)."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    ``frozen`` marks parameters that optimizers must skip; it has no effect
    on gradient computation itself.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "frozen")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.frozen = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method-style ops ---------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def permute(self, axes) -> "Tensor":
        return permute(self, axes)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def clamp(self, lo: float, hi: float) -> "Tensor":
        return clamp(self, lo, hi)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tape:
    """Wengert list: ops recorded in creation order (which is topological)."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._spent = False

    def record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._nodes.append((out, parents, backward_fn))

    def reset(self) -> None:
        self._nodes.clear()
        self._spent = False

    def __len__(self) -> int:
        return len(self._nodes)


_tape = Tape()


def reset_tape() -> None:
    _tape.reset()


def tape_size() -> int:
    return len(_tape)


def _finite_or_die(arr: np.ndarray, op: str) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise AutodiffError(f"non-finite values produced by op '{op}'")


def _make(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    _finite_or_die(out_data, op)
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        _tape.record(out, parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``.

    The tape is single-shot: a second call without ``reset_tape`` is fatal.
    """
    if loss.data.shape != ():
        raise AutodiffError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not _tape._nodes:
        raise AutodiffError("tape is empty; nothing was recorded")
    if _tape._spent:
        raise AutodiffError("backward already called on this tape; call reset_tape() first")
    _tape._spent = True
    loss.grad = np.array(1.0)
    for out, parents, backward_fn in reversed(_tape._nodes):
        g = out.grad
        if g is None:
            continue
        for parent, pg in zip(parents, backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += pg


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd, "add")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: incompatible shapes {a.shape} and {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), bwd, "div")


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient w.r.t. ``c``)."""
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bwd, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(x: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.maximum(d, 0))),
                   np.exp(np.minimum(d, 0)) / (1.0 + np.exp(np.minimum(d, 0))))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = (x.data > lo) & (x.data < hi)
    return _make(out, (x,), lambda g: (g * mask,), "clamp")


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, x.shape).copy(),)

    return _make(out, (x,), bwd, "sum")


def tensor_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_pool(x: Tensor, axes) -> Tensor:
    """Average over the given axes (used to pool feature grids and tokens)."""
    return tensor_mean(x, axis=tuple(axes), keepdims=False)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inverse),), "permute")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bwd, "concat")


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup (embedding tables); backward scatters into the table."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table with {table.shape[0]} rows")

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(table.data[idx], (table,), bwd, "gather_rows")


def logsumexp(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Stabilized log-sum-exp along one axis; backward is the softmax."""
    m = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = m + np.log(total)
    soft = shifted / total
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (g2 * soft,)

    return _make(out, (x,), bwd, "logsumexp")


def softmax(x: Tensor, axis: int) -> Tensor:
    return exp(add(x, neg(logsumexp(x, axis=axis, keepdims=True))))


# ---------------------------------------------------------------------------
# Embedding-space helpers
# ---------------------------------------------------------------------------

_NORM_EPS = 1e-12


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm.

    A row with norm <= 1e-12 is a degenerate embedding and is fatal.
    """
    sq = tensor_sum(mul(x, x), axis=-1, keepdims=True)
    if np.any(sq.data <= _NORM_EPS * _NORM_EPS):
        raise AutodiffError("l2_normalize: near-zero row (degenerate embedding)")
    return div(x, sqrt(sq))


def cosine_similarity_matrix(v: Tensor, t: Tensor) -> Tensor:
    """All-pairs cosine similarities between rows of ``v`` (N,d) and ``t`` (M,d)."""
    if v.data.ndim != 2 or t.data.ndim != 2 or v.shape[1] != t.shape[1]:
        raise ShapeError(f"cosine_similarity_matrix: incompatible shapes {v.shape} and {t.shape}")
    return matmul(l2_normalize(v), permute(l2_normalize(t), (1, 0)))


def info_nce(
    similarities: Tensor,
    positives: Sequence[tuple[int, int]],
    tau,
    direction: str = "row",
    reduction: str = "sum",
) -> Tensor:
    """Temperature-scaled softmax cross-entropy over a similarity matrix.

    ``direction`` picks the anchor axis: "row" anchors rows against all
    columns, "column" anchors columns against all rows. ``positives`` holds
    exactly one (row, col) pair per anchor. The log-sum-exp is max-shifted,
    so extreme similarity/temperature combinations stay finite.
    """
    if direction not in ("row", "column"):
        raise ValueError(f"info_nce: unknown direction {direction!r}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"info_nce: unknown reduction {reduction!r}")
    tau_t = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    if tau_t.data.shape != ():
        raise ShapeError("info_nce: tau must be a scalar")
    if float(tau_t.data) <= 0.0:
        raise AutodiffError(f"info_nce: tau must be positive, got {float(tau_t.data)}")

    s = similarities if direction == "row" else permute(similarities, (1, 0))
    pairs = [(int(r), int(c)) for (r, c) in positives]
    if direction == "column":
        pairs = [(c, r) for (r, c) in pairs]
    n_anchors, n_candidates = s.shape
    seen = [c for (r, c) in sorted(pairs)]
    if sorted(r for (r, _) in pairs) != list(range(n_anchors)):
        raise AutodiffError("info_nce: every anchor needs exactly one positive")
    if any(c < 0 or c >= n_candidates for c in seen):
        raise ShapeError("info_nce: positive index out of range")

    z = div(s, tau_t)
    lse = logsumexp(z, axis=1)
    onehot = np.zeros(s.shape)
    for r, c in pairs:
        onehot[r, c] = 1.0
    picked = tensor_sum(mul(z, Tensor(onehot)), axis=1)
    per_anchor = add(lse, neg(picked))
    total = tensor_sum(per_anchor)
    if reduction == "mean":
        total = scale(total, 1.0 / n_anchors)
    return total


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-6) -> float:
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    Returns the max over all coordinates of |analytic - numeric| /
    max(|analytic|, |numeric|, 1e-8). ``fn`` must be scalar-valued and
    deterministic. Resets the tape on both sides.
    """
    reset_tape()
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    reset_tape()

    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(fn(*inputs).data)
                flat[i] = orig - step
                fm = float(fn(*inputs).data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * step)
                err = abs(aflat[i] - numeric) / max(abs(aflat[i]), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction and a per-parameter step count.

    Parameters flagged ``frozen`` are skipped entirely (no data change, no
    moment update), which keeps them bitwise stable however long they stay
    frozen.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._steps = [0] * len(self.params)

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.frozen:
                continue
            if p.grad is None:
                raise AutodiffError(f"Adam: parameter {p.name or i} has no gradient")
            g = p.grad
            self._steps[i] += 1
            t = self._steps[i]
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / (1.0 - self.beta1 ** t)
            v_hat = self._v[i] / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Seeded uniform init in +-1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)
