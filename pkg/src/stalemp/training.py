"""Losses, optimizer and the mini-batch training engine."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .diagnostics import (convergence_stats, diagnose, full_batch_forward,
                          lipschitz_estimates)
from .graph import BatchContext, Graph, degree_centrality, make_batch, partition_greedy
from .history import HistoryStore
from .layer import AugmentMode, all_parameters, forward_batch, init_params


@dataclass
class TrainConfig:
    lam: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 0.0
    dropout: float = 0.1
    layers: int = 2
    hidden: int = 16
    epochs: int = 50
    num_clusters: int = 4
    batch_clusters: int = 2
    g_thres: float = math.inf
    augment: str = "sum"
    stale_reduction: str = "mean"
    use_gamma: bool = True
    use_stale_loss: bool = True
    use_augment: bool = True
    warm_start: bool = False
    shuffle: bool = True
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if not 1 <= self.batch_clusters <= self.num_clusters:
            raise ValueError("need 1 <= batch_clusters <= num_clusters")
        AugmentMode.parse(self.augment)
        if self.stale_reduction not in ("mean", "sum"):
            raise ValueError("stale_reduction must be 'mean' or 'sum'")

    @property
    def mode(self) -> AugmentMode:
        return AugmentMode.parse(self.augment) if self.use_augment else AugmentMode.NONE

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.use_stale_loss else 0.0


# ---------------------------------------------------------------------------
# Staleness regularization

class SnapshotStore:
    """Detached final-layer rows and the epoch each node was last in a batch.

    Epoch tag 0 means no snapshot yet (epochs are 1-indexed).
    """

    def __init__(self, num_nodes: int, dim: int):
        self.rows = np.zeros((num_nodes, dim))
        self.epoch = np.zeros(num_nodes, dtype=np.int64)

    def read(self, nodes, epoch: int):
        nodes = np.asarray(nodes, dtype=np.int64)
        tags = self.epoch[nodes]
        return self.rows[nodes].copy(), (tags >= 1) & (tags < epoch)

    def update(self, nodes, final, epoch: int) -> None:
        nodes = np.asarray(nodes, dtype=np.int64)
        final = np.asarray(final, dtype=np.float64)
        if final.shape != (nodes.size, self.rows.shape[1]):
            raise ValueError(f"snapshot update: expected {(nodes.size, self.rows.shape[1])}, got {final.shape}")
        self.rows[nodes] = final
        self.epoch[nodes] = epoch


def staleness_loss(current: Tensor, nodes, snaps: SnapshotStore, epoch: int) -> Tensor:
    """Sum over batch nodes of ``||h_k - h_{k-1}||^2`` against detached snapshots."""
    if current.shape[1] != snaps.rows.shape[1]:
        raise ValueError(f"embedding width {current.shape[1]} != snapshot width {snaps.rows.shape[1]}")
    prev, has = snaps.read(nodes, epoch)
    if not has.any():
        return Tensor(0.0)
    diff = ad.sub(current, Tensor(prev))
    return ad.square_sum(ad.mul(diff, Tensor(np.repeat(has[:, None], prev.shape[1], axis=1) * 1.0)))


def total_loss(task: Tensor, stale: Tensor, lam: float) -> Tensor:
    return ad.add(task, ad.scale(stale, lam))


# ---------------------------------------------------------------------------
# Optimizer

class Adam:
    """Adam with decoupled weight decay; zeroes gradients after each step.

    Parameters that did not take part in the last backward pass are updated
    with a zero gradient.
    """

    def __init__(self, params: list[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        if all(p.grad is None for p in self.params):
            raise RuntimeError("Adam.step called before any gradient was populated")
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros(p.shape) if p.grad is None else p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.value *= 1.0 - self.lr * self.weight_decay
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# Engine

def split_nodes(labels, val_frac: float = 0.2, seed=0):
    """Seeded per-class split; returns boolean (train, val) masks."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labels = np.asarray(labels)
    val = np.zeros(labels.size, dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = int(round(val_frac * idx.size))
        val[rng.permutation(idx)[:k]] = True
    return ~val, val


def accuracy(logits: np.ndarray, labels, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return float("nan")
    return float(np.mean(np.argmax(logits[mask], axis=1) == np.asarray(labels)[mask]))


@dataclass
class StepRecord:
    epoch: int
    iteration: int
    task_loss: float
    stale_loss: float
    total_loss: float
    grad_sq_norm: float
    frontier: int
    retained: int


class Trainer:
    """Mini-batch training over cluster batches with a historical cache."""

    def __init__(self, graph: Graph, features, labels, config: TrainConfig,
                 train_mask=None, val_mask=None, partition=None):
        self.graph = graph
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.config = cfg = config
        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        init_rng, self.schedule_rng, self.dropout_rng, split_rng = (np.random.default_rng(s) for s in seeds)
        if train_mask is None:
            train_mask, val_mask = split_nodes(self.labels, 0.2, split_rng)
        self.train_mask = np.asarray(train_mask, dtype=bool)
        self.val_mask = np.zeros_like(self.train_mask) if val_mask is None else np.asarray(val_mask, dtype=bool)
        self.num_classes = int(self.labels.max()) + 1
        dims = [self.features.shape[1]] + [cfg.hidden] * (cfg.layers - 1) + [self.num_classes]
        self.dims = dims
        self.mode = cfg.mode
        self.params = init_params(dims, self.mode, init_rng)
        self.store = HistoryStore(self.features, dims[:-1], cfg.g_thres)
        self.snaps = SnapshotStore(graph.num_nodes, self.num_classes)
        self.partition = partition if partition is not None else \
            partition_greedy(graph, cfg.num_clusters, cfg.seed)
        self.optimizer = Adam(all_parameters(self.params), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
        self.modulation = degree_centrality(graph).modulation()
        self.steps: list[StepRecord] = []
        self.history: list[dict] = []
        self.grad_variance = 0.0
        self.epoch = 0
        self._batches = {}
        if cfg.warm_start:
            self.store.warm_start(full_batch_forward(graph, self.features, self.params, 1))

    # -- scheduling ---------------------------------------------------------

    def batch(self, cluster_ids) -> BatchContext:
        key = tuple(sorted(int(c) for c in cluster_ids))
        if key not in self._batches:
            self._batches[key] = make_batch(self.partition, key, self.graph)
        return self._batches[key]

    def schedule(self) -> list:
        k, b = self.partition.num_clusters, self.config.batch_clusters
        order = self.schedule_rng.permutation(k) if self.config.shuffle else np.arange(k)
        return [self.batch(order[i:i + b]) for i in range(0, k, b)]

    def evaluation_batches(self) -> list:
        k, b = self.partition.num_clusters, self.config.batch_clusters
        return [self.batch(range(i, min(i + b, k))) for i in range(0, k, b)]

    # -- one optimizer step -------------------------------------------------

    def train_step(self, ctx, epoch: int):
        cfg, store = self.config, self.store
        it = store.tick()
        persistence = store.persistence(1, ctx.frontier) if store.num_layers > 1 else np.zeros(0, dtype=np.int64)
        out = forward_batch(self.graph, ctx, store, self.params, epoch, self.mode,
                            modulation=self.modulation, use_gamma=cfg.use_gamma,
                            dropout=cfg.dropout, rng=self.dropout_rng)
        rows = np.flatnonzero(self.train_mask[ctx.nodes])
        task = ad.cross_entropy(out.final, self.labels[ctx.nodes], rows) if rows.size else Tensor(0.0)
        stale = staleness_loss(out.final, ctx.nodes, self.snaps, epoch) if cfg.use_stale_loss else Tensor(0.0)
        if cfg.stale_reduction == "mean":
            # same per-node scale as the averaged task loss
            stale = ad.scale(stale, 1.0 / ctx.size)
        loss = total_loss(task, stale, cfg.effective_lambda)
        ad.backward(loss)
        for l, h in enumerate(out.hiddens, start=1):
            adj = h.grad if h.grad is not None else np.zeros(h.shape)
            store.record_grad_norms(l, ctx.nodes, adj)
        grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in self.optimizer.params]
        flat = np.concatenate([g.ravel() for g in grads])
        self.optimizer.step()
        for l, h in enumerate(out.hiddens, start=1):
            store.push(l, ctx.nodes, h.value, it)
        self.snaps.update(ctx.nodes, out.final.value, epoch)
        retained = out.num_retained[-1] if out.attention else 0
        rec = StepRecord(epoch, it, task.item(), stale.item(), loss.item(), float(flat @ flat),
                         int(ctx.frontier.size), retained)
        self.steps.append(rec)
        return rec, flat, persistence, out

    def train_epoch(self) -> dict:
        self.epoch += 1
        epoch = self.epoch
        start = time.perf_counter()
        recs, flats, pers = [], [], []
        for ctx in self.schedule():
            rec, flat, p, _ = self.train_step(ctx, epoch)
            recs.append(rec)
            flats.append(flat)
            pers.append(p)
        flats = np.stack(flats)
        self.grad_variance = float(np.mean(np.sum((flats - flats.mean(axis=0)) ** 2, axis=1)))
        pers = np.concatenate(pers) if pers else np.zeros(0)
        logits = self.predict()
        cached = [s for s in self.store.grad_norm[1:]]
        row = {
            "epoch": epoch,
            "task_loss": float(np.mean([r.task_loss for r in recs])),
            "stale_loss": float(np.mean([r.stale_loss for r in recs])),
            "total_loss": float(np.mean([r.total_loss for r in recs])),
            "train_acc": accuracy(logits, self.labels, self.train_mask),
            "val_acc": accuracy(logits, self.labels, self.val_mask),
            "mean_persistence": float(pers.mean()) if pers.size else 0.0,
            "max_persistence": int(pers.max()) if pers.size else 0,
            "mean_grad_staleness": float(np.mean(cached)) if cached else 0.0,
            "wall_ms": (time.perf_counter() - start) * 1000.0,
        }
        self.history.append(row)
        return row

    def fit(self, epochs: int | None = None, callback=None) -> list[dict]:
        for _ in range(self.config.epochs if epochs is None else epochs):
            row = self.train_epoch()
            if callback is not None:
                callback(self, row)
        return self.history

    # -- evaluation and diagnostics ----------------------------------------

    def exact_embeddings(self) -> list[np.ndarray]:
        return full_batch_forward(self.graph, self.features, self.params, max(self.epoch, 1))

    def predict(self) -> np.ndarray:
        return self.exact_embeddings()[-1]

    def lipschitz(self):
        return lipschitz_estimates(self.params, self.exact_embeddings(), self.modulation,
                                   lam=self.config.effective_lambda, use_gamma=self.config.use_gamma)

    def convergence(self, smoothness: float | None = None):
        if smoothness is None:
            smoothness = self.lipschitz().smoothness
        losses = [r.total_loss for r in self.steps]
        return convergence_stats([r.grad_sq_norm for r in self.steps], smoothness, self.config.lr,
                                 losses[0] if losses else 0.0, min(losses) if losses else 0.0,
                                 self.grad_variance)

    def diagnose(self):
        lip_lam = self.config.effective_lambda
        report = diagnose(self.graph, self.store, self.params, self.evaluation_batches(),
                          self.modulation, t=max(self.epoch, 1), lam=lip_lam,
                          use_gamma=self.config.use_gamma)
        report.convergence = self.convergence(report.lipschitz.smoothness)
        report.extra["epoch"] = self.epoch
        return report

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["g_thres"] = None if math.isinf(self.config.g_thres) else self.config.g_thres
        d["betas"] = list(self.config.betas)
        return d
