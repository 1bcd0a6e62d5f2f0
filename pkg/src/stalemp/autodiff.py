"""Define-by-run reverse-mode differentiation over dense float64 arrays.

Only the operations the attention layer and the losses need are provided.
Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to parent adjoints. :func:`backward`
orders the recorded graph into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

LEAKY_SLOPE = 0.2


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, c):
        return divide(self, c)

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A leaf tensor whose gradient accumulates until :meth:`zero_grad`."""

    __slots__ = ()

    def __init__(self, value, name):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=True, name=name)

    def zero_grad(self):
        self.grad = None


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _op(value, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _check_same(a, b, "add")
    return _op(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _check_same(a, b, "sub")
    return _op(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _op(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op(a.value * c, (a,), lambda g: (g * c,))


def divide(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op(a.value / c, (a,), lambda g: (g / c,))


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single-element tensor ``s``."""
    if s.value.size != 1:
        raise ValueError("scale_by expects a single-element scale")
    xv, sv = x.value, s.value
    sc = float(sv.reshape(-1)[0])
    return _op(xv * sc, (x, s), lambda g: (g * sc, np.asarray(np.sum(g * xv)).reshape(sv.shape)))


def row_scale(x: Tensor, w: Tensor) -> Tensor:
    """Scale row ``r`` of ``x`` (E x F) by ``w[r, 0]`` (w is E x 1)."""
    if x.value.ndim != 2 or w.shape != (x.shape[0], 1):
        raise ValueError(f"row_scale: shapes {x.shape} and {w.shape}")
    xv, wv = x.value, w.value
    return _op(xv * wv, (x, w), lambda g: (g * wv, np.sum(g * xv, axis=1, keepdims=True)))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_cols: shapes {a.shape} and {b.shape}")
    k = a.shape[1]
    return _op(np.concatenate([a.value, b.value], axis=1), (a, b),
               lambda g: (g[:, :k], g[:, k:]))


def total(a: Tensor) -> Tensor:
    return _op(np.asarray(a.value.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def square_sum(a: Tensor) -> Tensor:
    av = a.value
    return _op(np.asarray(np.sum(av * av)), (a,), lambda g: (2.0 * float(g) * av,))


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def back(g):
        out = np.zeros((n,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return _op(a.value[idx], (a,), back)


# ---------------------------------------------------------------------------
# Nonlinearities

def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    pos = x.value > 0
    d = np.where(pos, 1.0, slope)
    return _op(np.where(pos, x.value, slope * x.value), (x,), lambda g: (g * d,))


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.value)
    return _op(y, (x,), lambda g: (g * y * (1.0 - y),))


def elu(x: Tensor) -> Tensor:
    xv = x.value
    neg = np.expm1(np.minimum(xv, 0.0))
    y = np.where(xv > 0, xv, neg)
    d = np.where(xv > 0, 1.0, neg + 1.0)
    return _op(y, (x,), lambda g: (g * d,))


def softplus(x: Tensor) -> Tensor:
    xv = x.value
    return _op(np.logaddexp(0.0, xv), (x,), lambda g: (g * expit(xv),))


# ---------------------------------------------------------------------------
# Segmented reductions. Entries of segment r occupy rows ptr[r]:ptr[r+1].

def segment_ids(ptr: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(ptr.shape[0] - 1), np.diff(ptr))


def segment_sum_np(x: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    nseg = ptr.shape[0] - 1
    out = np.zeros((nseg,) + x.shape[1:])
    counts = np.diff(ptr)
    nonempty = counts > 0
    if np.any(nonempty):
        out[nonempty] = np.add.reduceat(x, ptr[:-1][nonempty], axis=0)
    return out


def segment_softmax_np(scores: np.ndarray, ptr: np.ndarray) -> np.ndarray:
    """Max-shifted softmax within every segment of a column of scores."""
    if scores.shape[0] == 0:
        return scores.copy()
    counts = np.diff(ptr)
    nonempty = counts > 0
    starts = ptr[:-1][nonempty]
    seg_local = np.repeat(np.arange(starts.size), counts[nonempty])
    peak = np.maximum.reduceat(scores, starts, axis=0)
    e = np.exp(scores - peak[seg_local])
    denom = np.add.reduceat(e, starts, axis=0)
    return e / denom[seg_local]


def segment_sum(x: Tensor, ptr: np.ndarray) -> Tensor:
    ids = segment_ids(ptr)
    return _op(segment_sum_np(x.value, ptr), (x,), lambda g: (g[ids],))


def segmented_softmax(scores: Tensor, ptr: np.ndarray) -> Tensor:
    """Softmax over each segment of an (E x 1) score column.

    ``ptr`` must partition ``range(E)``; empty segments produce no entries.
    """
    if scores.value.ndim != 2 or scores.shape[1] != 1:
        raise ValueError("segmented_softmax expects an (E, 1) column")
    if ptr[0] != 0 or ptr[-1] != scores.shape[0] or np.any(np.diff(ptr) < 0):
        raise ValueError("segments must partition the score range")
    y = segment_softmax_np(scores.value, ptr)
    ids = segment_ids(ptr)

    def back(g):
        dot = segment_sum_np(g * y, ptr)
        return (y * (g - dot[ids]),)

    return _op(y, (scores,), back)


# ---------------------------------------------------------------------------
# Losses

def cross_entropy(logits: Tensor, labels, mask=None) -> Tensor:
    """Mean softmax cross-entropy over the rows selected by ``mask``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    rows = np.arange(n) if mask is None else np.asarray(mask)
    if rows.dtype == bool:
        rows = np.flatnonzero(rows)
    if rows.size == 0:
        raise ValueError("cross_entropy: empty mask")
    lab = labels[rows]
    if lab.min() < 0 or lab.max() >= c:
        raise ValueError("cross_entropy: label out of range")
    z = logits.value[rows]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(rows.size), lab])
    prob = np.exp(z - lse[:, None])

    def back(g):
        d = prob.copy()
        d[np.arange(rows.size), lab] -= 1.0
        out = np.zeros((n, c))
        out[rows] = d * (float(g) / rows.size)
        return (out,)

    return _op(np.asarray(loss), (logits,), back)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# Reverse pass

@dataclass
class Tape:
    """Topologically ordered record of every tensor reachable from a root."""

    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def replay(self, root: Tensor) -> None:
        for node in self.nodes:
            if not isinstance(node, Parameter):
                node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.backward_fn is None or node.grad is None:
                continue
            for parent, g in zip(node.parents, node.backward_fn(node.grad)):
                if not parent.requires_grad or g is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + g


def backward(root: Tensor) -> Tape:
    """Populate ``.grad`` on every tensor that ``root`` depends on."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    tape = Tape.record(root)
    if root.requires_grad:
        tape.replay(root)
    return tape


# ---------------------------------------------------------------------------
# Finite-difference checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: tuple
    errors: dict
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic, numeric, floor: float = 1e-3):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale_ = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale_


def grad_check(f, params, h: float = 1e-6, tol: float = 1e-5, floor: float = 1e-3) -> GradCheckReport:
    """Compare taped gradients of scalar ``f()`` with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    near-zero coordinates from dividing rounding noise by nothing.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = {p.name: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for p in params}
    errors, worst, max_err = {}, (None, None), 0.0
    for p in params:
        numeric = np.zeros(p.shape)
        flat = p.value.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = f().item()
            flat[k] = orig - h
            down = f().item()
            flat[k] = orig
            nflat[k] = (up - down) / (2.0 * h)
        err = relative_error(analytic[p.name], numeric, floor)
        errors[p.name] = err
        if err.size and err.max() > max_err:
            max_err = float(err.max())
            worst = (p.name, int(np.argmax(err)))
    for p in params:
        p.zero_grad()
    return GradCheckReport(max_err, worst, errors, tol)
