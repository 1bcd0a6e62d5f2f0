"""Full-batch reference computations and staleness diagnostics.

Everything here reads frozen parameters and caches; nothing mutates training
state. The full-batch forward is plain numpy with no tape, and it runs the
same float operations in the same order as the taped layer, so a batch
covering every node reproduces it exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, batch_from_nodes, symmetric_normalize
from .history import HistoryStore
from .layer import AugmentMode, LayerParams, forward_batch

L_PHI = 1.0      # ELU is 1-Lipschitz
L_TASK = 1.0     # smoothness bound used for softmax cross-entropy
CONVERGENCE_RTOL = 1e-9


def _leaky(x, slope=ad.LEAKY_SLOPE):
    return np.where(x > 0, x, slope * x)


def _elu(x):
    neg = np.expm1(np.minimum(x, 0.0))
    return np.where(x > 0, x, neg)


def full_batch_forward(g: Graph, features, params: list[LayerParams], t: int = 1) -> list[np.ndarray]:
    """Exact embeddings ``[h^(0), ..., h^(L)]`` with plain attention everywhere."""
    if t < 1:
        raise ValueError("epochs are 1-indexed")
    x = np.asarray(features, dtype=np.float64)
    ptr, src = g.offsets, g.neighbors
    dst = ad.segment_ids(ptr)
    out = [x]
    for l, p in enumerate(params, start=1):
        if x.shape[1] != p.dim_in:
            raise ValueError(f"layer {l} expects width {p.dim_in}, got {x.shape[1]}")
        if p.mode is AugmentMode.CONCAT:
            x = np.concatenate([x, np.zeros((x.shape[0], 1))], axis=1)
        f = p.dim_out
        a = p.a.value
        z = x @ p.W.value
        el = z @ a[np.arange(f)]
        er = z @ a[np.arange(f, 2 * f)]
        alpha = ad.segment_softmax_np(_leaky(el[dst] + er[src]), ptr)
        x = _elu(ad.segment_sum_np(z[src] * alpha, ptr))
        out.append(x)
    return out


def plain_gat_forward(g: Graph, features, params: list[LayerParams], dropout=0.0, rng=None) -> Tensor:
    """Taped single-head GAT over the whole graph (no cache, no staleness)."""
    x = Tensor(np.asarray(features, dtype=np.float64))
    ptr, src = g.offsets, g.neighbors
    for p in params:
        if dropout > 0.0:
            x = ad.dropout(x, dropout, rng)
        if p.mode is AugmentMode.CONCAT:
            x = ad.concat_cols(x, Tensor(np.zeros((x.shape[0], 1))))
        z = ad.matmul(x, p.W)
        f = p.dim_out
        el = ad.matmul(z, ad.gather_rows(p.a, np.arange(f)))
        er = ad.matmul(z, ad.gather_rows(p.a, np.arange(f, 2 * f)))
        dst = ad.segment_ids(ptr)
        scores = ad.leaky_relu(ad.add(ad.gather_rows(el, dst), ad.gather_rows(er, src)))
        alpha = ad.segmented_softmax(scores, ptr)
        x = ad.elu(ad.segment_sum(ad.row_scale(ad.gather_rows(z, src), alpha), ptr))
    return x


# ---------------------------------------------------------------------------
# Staleness measurement

def measure_staleness(store: HistoryStore, exact: list[np.ndarray]) -> list[np.ndarray]:
    """Row distances ``||h̄^(l) - h^(l)||`` for every cached layer."""
    out = [np.zeros(store.num_nodes)]
    for l in range(1, store.num_layers):
        out.append(np.linalg.norm(store.embeddings[l] - exact[l], axis=1))
    return out


def approximate_final(g: Graph, store: HistoryStore, params, batches, t: int = 1) -> np.ndarray:
    """Final embeddings of every node computed batch-by-batch from the cache.

    Staleness indicators are zeroed and eviction disabled, so the only
    difference from the exact forward is the cached frontier rows.
    """
    mode = params[0].mode
    out = np.zeros((g.num_nodes, params[-1].dim_out))
    seen = np.zeros(g.num_nodes, dtype=bool)
    for ctx in batches:
        res = forward_batch(g, ctx, store, params, t, mode, zero_staleness=True, evict=False)
        out[ctx.nodes] = res.final.value
        seen[ctx.nodes] = True
    if not seen.all():
        raise ValueError("batches do not cover every node")
    return out


# ---------------------------------------------------------------------------
# Lipschitz constants

def spectral_norm(W, tol: float = 1e-8, max_iter: int = 10_000, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``W^T W``."""
    W = np.asarray(W, dtype=np.float64)
    if not np.any(W):
        return 0.0
    v = np.random.default_rng(seed).standard_normal(W.shape[1])
    v /= np.linalg.norm(v)
    est = 0.0
    for _ in range(max_iter):
        w = W.T @ (W @ v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            # start vector landed in the null space; nudge it
            v = np.roll(v, 1) + 1e-3
            v /= np.linalg.norm(v)
            continue
        v = w / lam
        if abs(lam - est) <= tol * lam:
            return math.sqrt(lam)
        est = lam
    raise RuntimeError(f"power iteration did not converge in {max_iter} iterations")


@dataclass
class LipschitzReport:
    spectral_norms: list
    a_norms: list
    gamma_max: list
    sigma_max: float
    H_max: list
    L_alpha: list
    betas: list
    smoothness: float
    lam: float


def lipschitz_estimates(params: list[LayerParams], embeddings, modulation, lam: float = 0.5,
                        use_gamma: bool = True) -> LipschitzReport:
    """Per-layer constants ``beta_l = L_phi ||W|| (1 + L_alpha H_max)``.

    ``L_alpha = 2 ||a|| ||W|| (1 + gamma_max sigma_max)`` with
    ``gamma_max = gamma(1) = beta``; the composite smoothness is
    ``(L_task + 2 lam) * prod(beta_l)``.
    """
    sigma_max = float(np.max(np.abs(modulation))) if np.size(modulation) else 0.0
    norms, a_norms, gmax, hmax, l_alpha, betas = [], [], [], [], [], []
    for l, p in enumerate(params, start=1):
        w = spectral_norm(p.W.value)
        an = float(np.linalg.norm(p.a.value))
        g = float(p.beta().value.reshape(-1)[0]) if use_gamma else 0.0
        h = float(np.linalg.norm(embeddings[l - 1], axis=1).max()) if len(embeddings[l - 1]) else 0.0
        la = 2.0 * an * w * (1.0 + g * sigma_max)
        norms.append(w)
        a_norms.append(an)
        gmax.append(g)
        hmax.append(h)
        l_alpha.append(la)
        betas.append(L_PHI * w * (1.0 + la * h))
    smooth = (L_TASK + 2.0 * lam) * float(np.prod(betas))
    return LipschitzReport(norms, a_norms, gmax, sigma_max, hmax, l_alpha, betas, smooth, lam)


def _neighborhood_max(g: Graph, values: np.ndarray) -> np.ndarray:
    out = np.zeros(g.num_nodes)
    deg = g.degrees
    nonempty = deg > 0
    if g.num_edges:
        out[nonempty] = np.maximum.reduceat(values[g.neighbors], g.offsets[:-1][nonempty])
    return out


def theorem1_bound(g: Graph, s_true: list[np.ndarray], betas, norm_adj=None) -> np.ndarray:
    """Per-node upper bound on the final-layer approximation error.

    ``sum_k prod_{l>k} beta_l * |N(i)| * ||Â_i|| * max_{j in N(i)} s_true[k-1][j]``
    for ``k = 1..L``, with ``s_true`` holding cache-vs-exact distances of
    layers ``0..L-1``.
    """
    if norm_adj is None:
        norm_adj = symmetric_normalize(g)
    L = len(betas)
    if len(s_true) < L:
        raise ValueError("need staleness for layers 0..L-1")
    deg = g.degrees.astype(np.float64)
    row_norm = np.sqrt(ad.segment_sum_np(norm_adj ** 2, g.offsets))
    bound = np.zeros(g.num_nodes)
    for k in range(1, L + 1):
        coef = float(np.prod(betas[k:]))
        bound += coef * deg * row_norm * _neighborhood_max(g, np.asarray(s_true[k - 1]))
    return bound


# ---------------------------------------------------------------------------
# Convergence statistics

@dataclass
class ConvergenceReport:
    steps: int
    mean_sq_grad: float
    rhs: float
    eta: float
    smoothness: float
    eta_ok: bool
    holds: bool
    loss0: float
    loss_min: float
    sigma2: float


def convergence_stats(grad_sq_norms, smoothness: float, eta: float, loss0: float,
                      loss_min: float, sigma2: float = 0.0) -> ConvergenceReport:
    """Average squared gradient norm against the SGD descent bound.

    ``loss_min`` stands in for the unknown optimum. When ``eta >= 2/L`` the
    bound does not apply and ``rhs`` is infinite. The comparison allows a
    relative slack of ``CONVERGENCE_RTOL`` because the bound is attained
    exactly on quadratics.
    """
    g = np.asarray(grad_sq_norms, dtype=np.float64)
    T = int(g.size)
    lhs = float(g.mean()) if T else 0.0
    eta_ok = smoothness <= 0 or eta < 2.0 / smoothness
    if eta_ok and T:
        denom = 2.0 - eta * smoothness
        rhs = 2.0 * (loss0 - loss_min) / (eta * T * denom) + eta * smoothness * sigma2 / denom
    else:
        rhs = math.inf
    holds = eta_ok and lhs <= rhs * (1.0 + CONVERGENCE_RTOL)
    return ConvergenceReport(T, lhs, float(rhs), eta, smoothness, bool(eta_ok),
                             bool(holds), loss0, loss_min, sigma2)


# ---------------------------------------------------------------------------
# Full report

BOUND_ATOL = 1e-10


@dataclass
class DiagnosticsReport:
    s_true: list
    final_error: np.ndarray
    bound: np.ndarray
    lipschitz: LipschitzReport
    convergence: ConvergenceReport | None = None
    extra: dict = field(default_factory=dict)

    @property
    def violations(self) -> int:
        return int(np.sum(self.final_error > self.bound + BOUND_ATOL))

    def summary(self) -> dict:
        lip = asdict(self.lipschitz)
        out = {
            "num_nodes": int(self.final_error.size),
            "bound_violations": self.violations,
            "mean_s_true": [float(s.mean()) for s in self.s_true],
            "max_final_error": float(self.final_error.max(initial=0.0)),
            "mean_final_error": float(self.final_error.mean()) if self.final_error.size else 0.0,
            "mean_bound": float(self.bound.mean()) if self.bound.size else 0.0,
            "lipschitz": lip,
        }
        if self.convergence is not None:
            out["convergence"] = asdict(self.convergence)
        out.update(self.extra)
        return out

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "layer", "s_true", "final_error", "bound"])
            for layer, s in enumerate(self.s_true):
                for i in range(s.size):
                    w.writerow([i, layer, repr(float(s[i])), repr(float(self.final_error[i])),
                                repr(float(self.bound[i]))])
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj)}")


def diagnose(g: Graph, store: HistoryStore, params, batches, modulation, *, t: int = 1,
             lam: float = 0.5, use_gamma: bool = True, convergence=None) -> DiagnosticsReport:
    exact = full_batch_forward(g, store.embeddings[0], params, t)
    s_true = measure_staleness(store, exact)
    approx = approximate_final(g, store, params, batches, t)
    final_error = np.linalg.norm(approx - exact[-1], axis=1)
    lip = lipschitz_estimates(params, exact, modulation, lam=lam, use_gamma=use_gamma)
    bound = theorem1_bound(g, s_true, lip.betas)
    return DiagnosticsReport(s_true, final_error, bound, lip, convergence)


def whole_graph_batches(g: Graph):
    return [batch_from_nodes(g, np.arange(g.num_nodes))]
