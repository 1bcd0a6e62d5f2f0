"""Staleness-aware graph attention.

One layer computes, for every in-batch target ``i``,

    h_i' = ELU( sum_{j in N(i) ∩ B} a_in_ij W h_j + sum_{j in N(i) \\ B} a_out_ij W h̄_j )

where the in-batch coefficients are a plain GAT softmax and the
out-of-batch ones subtract ``gamma(t) * s_j * sigmoid(c_j - c_avg)`` from the
raw score before normalizing. ``gamma(t) = beta / t`` with a learnable
nonnegative ``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .graph import BatchContext, Graph, degree_centrality
from .history import HistoryStore


class AugmentMode(str, Enum):
    NONE = "none"
    CONCAT = "concat"
    SUM = "sum"

    @classmethod
    def parse(cls, value) -> "AugmentMode":
        if isinstance(value, cls):
            return value
        aliases = {"summation": "sum", "concatenation": "concat", "off": "none"}
        return cls(aliases.get(value, value))


BETA_INIT = 1.0


@dataclass
class LayerParams:
    W: Parameter
    a: Parameter
    beta_raw: Parameter
    W_s: Parameter | None = None
    mode: AugmentMode = AugmentMode.NONE

    @property
    def dim_out(self) -> int:
        return self.W.shape[1]

    @property
    def dim_in(self) -> int:
        """Width of the un-augmented input rows."""
        return self.W.shape[0] - (1 if self.mode is AugmentMode.CONCAT else 0)

    def beta(self) -> Tensor:
        return ad.softplus(self.beta_raw)

    def parameters(self) -> list[Parameter]:
        ps = [self.W, self.a, self.beta_raw]
        return ps + ([self.W_s] if self.W_s is not None else [])


def _glorot(rng, shape):
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def init_params(dims, mode=AugmentMode.NONE, seed=0) -> list[LayerParams]:
    """Parameters for a ``len(dims) - 1`` layer model with widths ``dims``."""
    mode = AugmentMode.parse(mode)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for l, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        w_in = d_in + 1 if mode is AugmentMode.CONCAT else d_in
        W = Parameter(_glorot(rng, (w_in, d_out)), f"layer{l}.W")
        a = Parameter(_glorot(rng, (2 * d_out, 1)), f"layer{l}.a")
        beta_raw = Parameter(np.array([[math.log(math.expm1(BETA_INIT))]]), f"layer{l}.beta_raw")
        W_s = Parameter(_glorot(rng, (1, d_in)), f"layer{l}.W_s") if mode is AugmentMode.SUM else None
        layers.append(LayerParams(W, a, beta_raw, W_s, mode))
    return layers


def all_parameters(params: list[LayerParams]) -> list[Parameter]:
    return [p for layer in params for p in layer.parameters()]


# ---------------------------------------------------------------------------
# Scalar pieces

def gamma(t, beta):
    """Decay coefficient beta / t for 1-indexed epoch ``t``."""
    if t < 1:
        raise ValueError(f"epochs are 1-indexed, got t={t}")
    if isinstance(beta, Tensor):
        return ad.divide(beta, t)
    return beta / t


def staleness_penalty(s_j, c_j, c_avg, gamma_t):
    if np.any(np.asarray(s_j) < 0):
        raise ValueError("staleness must be nonnegative")
    return gamma_t * s_j * expit(c_j - c_avg)


# ---------------------------------------------------------------------------
# Vectorized attention over grouped edges

def _halves(p: LayerParams):
    f = p.dim_out
    return ad.gather_rows(p.a, np.arange(f)), ad.gather_rows(p.a, np.arange(f, 2 * f))


def edge_scores(z_tgt: Tensor, z_src: Tensor, dst, src, p: LayerParams) -> Tensor:
    """LeakyReLU(a^T [z_tgt[dst] || z_src[src]]) per edge, as an (E, 1) column."""
    a_tgt, a_src = _halves(p)
    el = ad.matmul(z_tgt, a_tgt)
    er = ad.matmul(z_src, a_src)
    return ad.leaky_relu(ad.add(ad.gather_rows(el, dst), ad.gather_rows(er, src)))


def edge_attention(z_tgt, z_src, ptr, src, p, penalty=None, gamma_t=None) -> Tensor:
    """Segmented softmax of edge scores, minus ``gamma_t * penalty`` if given.

    ``penalty`` holds the per-edge constant ``s_j * sigmoid(c_j - c_avg)``.
    """
    dst = ad.segment_ids(ptr)
    scores = edge_scores(z_tgt, z_src, dst, src, p)
    if penalty is not None and gamma_t is not None:
        pen = Tensor(np.asarray(penalty, dtype=np.float64).reshape(-1, 1))
        scores = ad.sub(scores, ad.scale_by(pen, gamma_t))
    return ad.segmented_softmax(scores, ptr)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def attention_out(h_i, frontier_rows, s, c, c_avg, t, p: LayerParams, use_gamma=True) -> np.ndarray:
    """Coefficients of one target over its retained out-of-batch neighbors.

    Rows are used as given, so pass already augmented rows when augmenting.
    """
    rows = _as_tensor(frontier_rows)
    k = rows.shape[0]
    if k == 0:
        return np.zeros(0)
    h_i = _as_tensor(h_i)
    if h_i.shape[1] != p.W.shape[0] or rows.shape[1] != p.W.shape[0]:
        raise ValueError("row width does not match W")
    z_t, z_s = ad.matmul(h_i, p.W), ad.matmul(rows, p.W)
    pen = staleness_penalty(np.asarray(s, dtype=np.float64), np.asarray(c, dtype=np.float64), c_avg, 1.0)
    g_t = gamma(t, p.beta()) if use_gamma else None
    alpha = edge_attention(z_t, z_s, np.array([0, k]), np.arange(k), p, pen, g_t)
    return alpha.value[:, 0]


def attention_in(h_i, in_batch_rows, p: LayerParams) -> np.ndarray:
    rows = _as_tensor(in_batch_rows)
    k = rows.shape[0]
    if k == 0:
        return np.zeros(0)
    h_i = _as_tensor(h_i)
    if h_i.shape[1] != p.W.shape[0] or rows.shape[1] != p.W.shape[0]:
        raise ValueError("row width does not match W")
    z_t, z_s = ad.matmul(h_i, p.W), ad.matmul(rows, p.W)
    return edge_attention(z_t, z_s, np.array([0, k]), np.arange(k), p).value[:, 0]


def aggregate(alpha_in, alpha_out, in_rows, frontier_rows, p: LayerParams) -> np.ndarray:
    """ELU of the two attention-weighted sums of transformed rows (one target)."""
    W = p.W.value
    total = np.zeros(W.shape[1])
    for alpha, rows in ((alpha_in, in_rows), (alpha_out, frontier_rows)):
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.size:
            total = total + alpha @ (np.atleast_2d(rows) @ W)
    return ad.elu(Tensor(total)).value


def augment(rows, s, mode, p: LayerParams | None = None) -> Tensor:
    """Attach the staleness channel to cached rows."""
    mode = AugmentMode.parse(mode)
    rows = _as_tensor(rows)
    s = np.asarray(s, dtype=np.float64).reshape(-1, 1)
    if s.shape[0] != rows.shape[0]:
        raise ValueError("staleness must align with rows")
    if mode is AugmentMode.NONE:
        return rows
    if mode is AugmentMode.CONCAT:
        return ad.concat_cols(rows, Tensor(np.log1p(s)))
    if p is None or p.W_s is None:
        raise ValueError("summation augmentation needs W_s")
    return ad.add(rows, ad.elu(ad.matmul(Tensor(s), p.W_s)))


def _augment_live(x: Tensor, mode) -> Tensor:
    # live rows carry zero staleness: a zero channel for concat, φ(W_s·0) = 0 for sum
    if mode is AugmentMode.CONCAT:
        return ad.concat_cols(x, Tensor(np.zeros((x.shape[0], 1))))
    return x


# ---------------------------------------------------------------------------
# Batched forward

@dataclass
class AttentionCoefficients:
    alpha_in: np.ndarray
    in_ptr: np.ndarray
    alpha_out: np.ndarray
    out_ptr: np.ndarray
    retained: np.ndarray


@dataclass
class BatchForward:
    final: Tensor
    hiddens: list
    attention: list

    @property
    def num_retained(self) -> list[int]:
        return [int(c.retained.size) for c in self.attention]


def _filter_frontier(ctx: BatchContext, keep: np.ndarray):
    """Drop out-edges whose source is evicted; returns (ptr, src, retained)."""
    new_index = np.cumsum(keep) - 1
    keep_edge = keep[ctx.out_src]
    cum = np.concatenate([[0], np.cumsum(keep_edge)])
    return cum[ctx.out_ptr], new_index[ctx.out_src[keep_edge]], ctx.frontier[keep]


def layer_forward(x_in: Tensor, ctx: BatchContext, p: LayerParams, mode, *,
                  frontier_rows=None, out_ptr=None, out_src=None, penalty=None, gamma_t=None):
    """One attention layer for the batch targets; returns (h, coefficients)."""
    x_in = _augment_live(x_in, mode)
    z_in = ad.matmul(x_in, p.W)
    alpha_in = edge_attention(z_in, z_in, ctx.in_ptr, ctx.in_src, p)
    agg = ad.segment_sum(ad.row_scale(ad.gather_rows(z_in, ctx.in_src), alpha_in), ctx.in_ptr)
    alpha_out_v = np.zeros((0, 1))
    if out_src is not None and out_src.size:
        z_out = ad.matmul(frontier_rows, p.W)
        alpha_out = edge_attention(z_in, z_out, out_ptr, out_src, p, penalty, gamma_t)
        agg = ad.add(agg, ad.segment_sum(ad.row_scale(ad.gather_rows(z_out, out_src), alpha_out), out_ptr))
        alpha_out_v = alpha_out.value
    return ad.elu(agg), (alpha_in.value, alpha_out_v)


def forward_batch(g: Graph, ctx: BatchContext, store: HistoryStore, params: list[LayerParams],
                  t: int, mode=AugmentMode.NONE, *, modulation=None, use_gamma=True,
                  dropout=0.0, rng=None, zero_staleness=False, evict=True) -> BatchForward:
    """Mini-batch forward with historical embeddings for the frontier.

    Layer ``l`` consumes live layer ``l-1`` states of in-batch neighbors and
    cached ``h̄^(l-1)`` rows of out-of-batch neighbors that survive eviction.
    ``zero_staleness`` forces every staleness indicator to 0 and, together
    with ``evict=False``, turns the model into a plain historical-embedding
    GAT.
    """
    mode = AugmentMode.parse(mode)
    if len(params) != store.num_layers:
        raise ValueError(f"{len(params)} layers of parameters for a {store.num_layers}-layer cache")
    for l, p in enumerate(params):
        if p.dim_in != store.layer_dims[l]:
            raise ValueError(f"layer {l + 1} expects input width {p.dim_in}, cache has {store.layer_dims[l]}")
    if modulation is None:
        modulation = degree_centrality(g).modulation()
    x = Tensor(store.embeddings[0][ctx.nodes])
    hiddens, coeffs = [], []
    for l, p in enumerate(params, start=1):
        if dropout > 0.0:
            x = ad.dropout(x, dropout, rng)
        cache_layer = l - 1
        keep = np.ones(ctx.frontier.size, dtype=bool)
        if evict and cache_layer > 0 and not math.isinf(store.g_thres):
            keep = store.persistence(cache_layer, ctx.frontier) <= store.g_thres
        out_ptr, out_src, retained = _filter_frontier(ctx, keep)
        frontier_rows = penalty = gamma_t = None
        if out_src.size:
            rows, rec = store.pull(cache_layer, retained)
            s = np.zeros(retained.size) if zero_staleness else rec.grad_norm
            frontier_rows = augment(rows, s, mode, p)
            if use_gamma:
                penalty = (s * modulation[retained])[out_src]
                gamma_t = gamma(t, p.beta())
        x, (a_in, a_out) = layer_forward(x, ctx, p, mode, frontier_rows=frontier_rows,
                                         out_ptr=out_ptr, out_src=out_src,
                                         penalty=penalty, gamma_t=gamma_t)
        coeffs.append(AttentionCoefficients(a_in[:, 0], ctx.in_ptr, a_out[:, 0], out_ptr, retained))
        if l < len(params):
            hiddens.append(x)
    return BatchForward(x, hiddens, coeffs)
