"""Per-layer cache of historical embeddings with staleness metadata."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class StalenessRecord:
    """Staleness indicators for a set of nodes pulled from one cache layer."""
    nodes: np.ndarray
    layer: int
    grad_norm: np.ndarray
    persistence: np.ndarray


class HistoryStore:
    """Cached embeddings ``h̄^(l)`` for layers ``0..L-1``.

    Layer 0 holds the raw input features and is never pushed, so it is never
    stale. Each layer also keeps the gradient-norm staleness ``s`` of every
    node (the norm of its hidden-embedding adjoint at the last backward pass
    that included it) and the iteration at which its row was last written.
    """

    def __init__(self, features, layer_dims, g_thres: float = math.inf):
        features = np.asarray(features, dtype=np.float64)
        layer_dims = list(layer_dims)
        if not layer_dims or layer_dims[0] != features.shape[1]:
            raise ValueError(
                f"layer_dims[0] must equal feature dim {features.shape[1]}, got {layer_dims[:1]}")
        n = features.shape[0]
        self.num_nodes = n
        self.layer_dims = layer_dims
        self.embeddings = [features.copy()] + [np.zeros((n, d)) for d in layer_dims[1:]]
        self.grad_norm = [np.zeros(n) for _ in layer_dims]
        self.last_update = [np.zeros(n, dtype=np.int64) for _ in layer_dims]
        self.g_thres = g_thres
        self.iteration = 0

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims)

    def _check_layer(self, layer):
        if not 0 <= layer < self.num_layers:
            raise IndexError(f"layer {layer} outside 0..{self.num_layers - 1}")

    def tick(self) -> int:
        """Advance the global iteration counter; returns the new iteration."""
        self.iteration += 1
        return self.iteration

    def persistence(self, layer: int, nodes=None) -> np.ndarray:
        self._check_layer(layer)
        nodes = slice(None) if nodes is None else np.asarray(nodes, dtype=np.int64)
        if layer == 0:
            return np.zeros(self.num_nodes, dtype=np.int64)[nodes]
        return self.iteration - self.last_update[layer][nodes]

    def pull(self, layer: int, nodes):
        """Return copies of cached rows plus their staleness record."""
        self._check_layer(layer)
        nodes = np.asarray(nodes, dtype=np.int64)
        rows = self.embeddings[layer][nodes].copy()
        record = StalenessRecord(nodes, layer, self.grad_norm[layer][nodes].copy(),
                                 self.persistence(layer, nodes))
        return rows, record

    def push(self, layer: int, nodes, embeddings, iteration: int | None = None) -> None:
        self._check_layer(layer)
        if layer == 0:
            raise ValueError("layer 0 holds raw features and cannot be pushed")
        nodes = np.asarray(nodes, dtype=np.int64)
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape != (nodes.size, self.layer_dims[layer]):
            raise ValueError(f"push: expected shape {(nodes.size, self.layer_dims[layer])}, "
                             f"got {embeddings.shape}")
        iteration = self.iteration if iteration is None else int(iteration)
        if nodes.size and iteration < self.last_update[layer][nodes].max():
            raise ValueError("push iteration precedes an existing stamp")
        self.iteration = max(self.iteration, iteration)
        self.embeddings[layer][nodes] = embeddings
        self.last_update[layer][nodes] = iteration

    def record_grad_norms(self, layer: int, nodes, hidden_adjoints) -> None:
        self._check_layer(layer)
        nodes = np.asarray(nodes, dtype=np.int64)
        adj = np.asarray(hidden_adjoints, dtype=np.float64)
        if adj.ndim != 2 or adj.shape[0] != nodes.size:
            raise ValueError(f"record_grad_norms: {adj.shape} adjoints for {nodes.size} nodes")
        self.grad_norm[layer][nodes] = np.linalg.norm(adj, axis=1)

    def evict_overdue(self, frontier, layer: int = 1) -> np.ndarray:
        """Frontier nodes whose layer-``layer`` persistence is within G_thres."""
        frontier = np.asarray(frontier, dtype=np.int64)
        if layer == 0 or math.isinf(self.g_thres):
            return frontier
        return frontier[self.persistence(layer, frontier) <= self.g_thres]

    def warm_start(self, exact_embeddings) -> None:
        """Seed layers >= 1 with exact embeddings (e.g. from a full-batch pass)."""
        for layer in range(1, self.num_layers):
            self.embeddings[layer][:] = exact_embeddings[layer]


def log_staleness(s):
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0):
        raise ValueError("staleness must be nonnegative")
    out = np.log1p(s_arr)
    return float(out) if out.ndim == 0 else out
