"""Graph storage, loading, synthetic generation and mini-batch construction.

Graphs are immutable CSR structures. Undirected inputs are stored with both
edge directions, so ``num_edges`` counts directed slots.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    """Raised when an input file does not follow the expected format."""


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    offsets: np.ndarray
    neighbors: np.ndarray

    def __post_init__(self):
        self.offsets.setflags(write=False)
        self.neighbors.setflags(write=False)

    @property
    def num_edges(self) -> int:
        return int(self.neighbors.shape[0])

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    def neighbors_of(self, i: int) -> np.ndarray:
        return self.neighbors[self.offsets[i]:self.offsets[i + 1]]

    def edge_sources(self) -> np.ndarray:
        """Row id of every CSR slot (the node that owns the neighbor list)."""
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    def validate(self) -> None:
        off = self.offsets
        if off.shape != (self.num_nodes + 1,) or off[0] != 0:
            raise ValueError("offsets must have length num_nodes + 1 and start at 0")
        if np.any(np.diff(off) < 0):
            raise ValueError("offsets must be nondecreasing")
        if off[-1] != self.num_edges:
            raise ValueError("offsets[-1] must equal num_edges")
        if self.num_edges and (self.neighbors.min() < 0 or self.neighbors.max() >= self.num_nodes):
            raise ValueError("neighbor id out of range")


def from_edges(num_nodes: int, src, dst, symmetrize: bool = True,
               add_self_loops: bool = False) -> Graph:
    """Build a CSR graph from edge endpoint arrays.

    Duplicate edges are removed and every neighbor list is sorted.
    """
    src = np.asarray(src, dtype=np.int64).ravel()
    dst = np.asarray(dst, dtype=np.int64).ravel()
    if src.shape != dst.shape:
        raise ValueError("src and dst must have equal length")
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= num_nodes):
        raise ValueError("edge endpoint out of range")
    if symmetrize:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    if add_self_loops:
        loops = np.arange(num_nodes, dtype=np.int64)
        src, dst = np.concatenate([src, loops]), np.concatenate([dst, loops])
    keys = np.unique(src * num_nodes + dst)
    rows, cols = keys // num_nodes, keys % num_nodes
    counts = np.bincount(rows, minlength=num_nodes)
    offsets = np.zeros(num_nodes + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return Graph(num_nodes, offsets, cols.astype(np.int64))


def with_self_loops(g: Graph) -> Graph:
    src = g.edge_sources()
    return from_edges(g.num_nodes, src, g.neighbors, symmetrize=False, add_self_loops=True)


# ---------------------------------------------------------------------------
# File formats

def read_edge_list(path, num_nodes: int | None = None, remap: bool = False):
    """Parse a tab-separated edge list.

    Returns ``(src, dst, mapping)`` where ``mapping`` is the sorted array of
    original ids when ``remap`` is set and ``None`` otherwise.
    """
    src, dst = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'src<TAB>dst', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            if u < 0 or v < 0:
                raise GraphFormatError(f"{path}:{lineno}: negative node id")
            src.append(u)
            dst.append(v)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    mapping = None
    if remap:
        mapping = np.unique(np.concatenate([src, dst]))
        src = np.searchsorted(mapping, src)
        dst = np.searchsorted(mapping, dst)
    if num_nodes is not None and src.size:
        top = int(max(src.max(), dst.max()))
        if top >= num_nodes:
            raise GraphFormatError(
                f"{path}: node id {top} exceeds declared node count {num_nodes} (id gap)")
    return src, dst, mapping


def write_edge_list(path, g: Graph) -> None:
    src = g.edge_sources()
    keep = src <= g.neighbors
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# src\tdst\n")
        for u, v in zip(src[keep], g.neighbors[keep]):
            fh.write(f"{u}\t{v}\n")


_FEATURE_HEADER = struct.Struct("<QQ")


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise GraphFormatError(f"{path}: truncated feature header")
    n, d = _FEATURE_HEADER.unpack_from(data)
    expected = _FEATURE_HEADER.size + 4 * n * d
    if len(data) != expected:
        raise GraphFormatError(f"{path}: expected {expected} bytes for {n}x{d} features, got {len(data)}")
    x = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(n, d)
    return x.astype(np.float64)


def write_features(path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(*x.shape))
        fh.write(x.tobytes())


def read_labels(path) -> np.ndarray:
    labels = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                labels.append(int(line))
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: bad label {line!r}") from None
    return np.asarray(labels, dtype=np.int64)


def write_labels(path, y: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(v)}\n" for v in y)


def load_edge_list(path, features_path, labels_path, remap: bool = False,
                   add_self_loops: bool = False):
    """Load a dataset from the edge-list / binary-feature / label-text trio.

    The node count comes from the feature header. With ``remap`` the distinct
    edge-list ids are compacted to ``0..k-1`` first; the mapping is returned
    as a fourth element.
    """
    x = read_features(features_path)
    y = read_labels(labels_path)
    n = x.shape[0]
    if y.shape[0] != n:
        raise GraphFormatError(f"{labels_path}: {y.shape[0]} labels for {n} feature rows")
    src, dst, mapping = read_edge_list(path, num_nodes=n, remap=remap)
    g = from_edges(n, src, dst, symmetrize=True, add_self_loops=add_self_loops)
    if remap:
        return g, x, y, mapping
    return g, x, y


# ---------------------------------------------------------------------------
# Derived structure

def symmetric_normalize(g: Graph) -> np.ndarray:
    """Per-slot weights of D^-1/2 A D^-1/2, aligned with ``g.neighbors``."""
    deg = g.degrees.astype(np.float64)
    src = g.edge_sources()
    return 1.0 / np.sqrt(deg[src] * deg[g.neighbors])


@dataclass(frozen=True)
class Centrality:
    c: np.ndarray
    c_avg: float

    def modulation(self) -> np.ndarray:
        """sigmoid(c_j - c_avg) per node."""
        from scipy.special import expit
        return expit(self.c - self.c_avg)


def degree_centrality(g: Graph) -> Centrality:
    c = g.degrees.astype(np.float64)
    c_avg = float(c.mean()) if g.num_nodes else 0.0
    return Centrality(c, c_avg)


# ---------------------------------------------------------------------------
# Partitioning and batches

@dataclass(frozen=True)
class Partition:
    num_clusters: int
    assignment: np.ndarray

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == cluster)


def partition_greedy(g: Graph, k: int, seed: int = 0) -> Partition:
    """Seeded BFS region growing into ``k`` clusters of near-equal size.

    Cluster ``c`` gets exactly ``n // k`` nodes plus one for the first
    ``n % k`` clusters. Growth restarts from a random unassigned node when a
    region's component is exhausted.
    """
    n = g.num_nodes
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= num_nodes, got k={k}, num_nodes={n}")
    rng = np.random.default_rng(seed)
    assignment = np.full(n, -1, dtype=np.int64)
    quotas = [n // k + (1 if c < n % k else 0) for c in range(k)]
    for c, quota in enumerate(quotas):
        size = 0
        queue: deque[int] = deque()
        while size < quota:
            if not queue:
                free = np.flatnonzero(assignment < 0)
                start = int(free[rng.integers(free.size)])
                assignment[start] = c
                size += 1
                queue.append(start)
                continue
            u = queue.popleft()
            for v in g.neighbors_of(u):
                if size >= quota:
                    break
                if assignment[v] < 0:
                    assignment[v] = c
                    size += 1
                    queue.append(int(v))
    return Partition(k, assignment)


@dataclass(frozen=True)
class BatchContext:
    """In-batch nodes, their one-hop frontier and the per-node neighbor split.

    Edge arrays are grouped by target: the in-batch neighbors of ``nodes[r]``
    are ``nodes[in_src[in_ptr[r]:in_ptr[r+1]]]`` and its out-of-batch
    neighbors are ``frontier[out_src[out_ptr[r]:out_ptr[r+1]]]``.
    """
    nodes: np.ndarray
    frontier: np.ndarray
    in_ptr: np.ndarray
    in_src: np.ndarray
    out_ptr: np.ndarray
    out_src: np.ndarray

    @property
    def size(self) -> int:
        return int(self.nodes.shape[0])

    def in_neighbors(self, r: int) -> np.ndarray:
        return self.nodes[self.in_src[self.in_ptr[r]:self.in_ptr[r + 1]]]

    def out_neighbors(self, r: int) -> np.ndarray:
        return self.frontier[self.out_src[self.out_ptr[r]:self.out_ptr[r + 1]]]


def batch_from_nodes(g: Graph, nodes) -> BatchContext:
    nodes = np.unique(np.asarray(nodes, dtype=np.int64))
    if nodes.size == 0:
        raise ValueError("empty batch")
    inside = np.zeros(g.num_nodes, dtype=bool)
    inside[nodes] = True
    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(nodes.size)

    # CSR slots are ordered by owner, and so are the sorted batch nodes
    slots = np.flatnonzero(inside[g.edge_sources()])
    nbr = g.neighbors[slots]
    owner = np.repeat(np.arange(nodes.size), g.degrees[nodes])
    is_in = inside[nbr]

    frontier = np.unique(nbr[~is_in])
    flocal = np.full(g.num_nodes, -1, dtype=np.int64)
    flocal[frontier] = np.arange(frontier.size)

    def ptr_of(mask):
        counts = np.bincount(owner[mask], minlength=nodes.size)
        ptr = np.zeros(nodes.size + 1, dtype=np.int64)
        np.cumsum(counts, out=ptr[1:])
        return ptr

    return BatchContext(
        nodes=nodes,
        frontier=frontier,
        in_ptr=ptr_of(is_in),
        in_src=local[nbr[is_in]],
        out_ptr=ptr_of(~is_in),
        out_src=flocal[nbr[~is_in]],
    )


def make_batch(p: Partition, cluster_ids, g: Graph) -> BatchContext:
    cluster_ids = np.asarray(list(cluster_ids), dtype=np.int64)
    if cluster_ids.size == 0:
        raise ValueError("empty cluster_ids")
    if cluster_ids.min() < 0 or cluster_ids.max() >= p.num_clusters:
        raise ValueError("cluster id out of range")
    nodes = np.flatnonzero(np.isin(p.assignment, cluster_ids))
    return batch_from_nodes(g, nodes)


# ---------------------------------------------------------------------------
# Synthetic data

def synth_sbm(n: int, blocks: int, p_in: float, p_out: float, feat_dim: int,
              seed: int = 0, noise: float = 0.5):
    """Stochastic block model with block-mean Gaussian features.

    Node ``i`` belongs to block ``i * blocks // n``. Block means are random
    unit vectors and the isotropic noise has total standard deviation
    ``noise`` (per-coordinate ``noise / sqrt(feat_dim)``), so feature rows
    have norm near 1. Nearest-mean classification separates the blocks
    perfectly at ``noise=0``.
    """
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    if blocks < 1 or n < blocks:
        raise ValueError("need 1 <= blocks <= n")
    if feat_dim < 1:
        raise ValueError("feat_dim must be positive")
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) * blocks) // n
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    g = from_edges(n, iu[keep], ju[keep])
    means = rng.standard_normal((blocks, feat_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    x = means[labels] + (noise / np.sqrt(feat_dim)) * rng.standard_normal((n, feat_dim))
    return g, x, labels.astype(np.int64)


def random_graph(num_nodes: int, num_edges: int, seed: int = 0) -> Graph:
    """Uniform random undirected graph with roughly ``num_edges`` directed slots."""
    rng = np.random.default_rng(seed)
    half = num_edges // 2
    src = rng.integers(num_nodes, size=half)
    dst = rng.integers(num_nodes, size=half)
    keep = src != dst
    return from_edges(num_nodes, src[keep], dst[keep])
