"""Gradient-driven mesh coarsening with interpolation both ways.

Nodes are kept with probabilities tied to their pressure-gradient rank,
the thinned cloud is reconnected with covariance-aware nearest neighbors,
and moving weighted least squares supplies the pooling matrix (fine to
coarse) and, computed independently, the unpooling matrix (coarse to
fine). Two stacked levels form the frozen hierarchy the model is built
around.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import SparseMatrix
from .graph import Graph, SurfaceMesh, _weighted_graph, graph_from_mesh


@dataclass
class GradientField:
    """Per-node field gradient vectors and their magnitudes."""

    vectors: np.ndarray          # (n, 3)
    magnitude: np.ndarray        # (n,)
    warned: np.ndarray           # (n,) bool, rank-deficient stencils

    def __post_init__(self):
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("non-finite gradient")


def _two_ring(neighbors: Sequence[np.ndarray], i: int) -> np.ndarray:
    ring = set(neighbors[i].tolist())
    for j in list(ring):
        ring.update(neighbors[j].tolist())
    ring.discard(i)
    return np.asarray(sorted(ring), dtype=np.int64)


def _stencil_solve(offsets: np.ndarray, dp: np.ndarray) -> Tuple[np.ndarray, int]:
    g, _, rank, _ = np.linalg.lstsq(offsets, dp, rcond=1e-8)
    return g, rank


def node_gradients(points: np.ndarray, neighbors: Sequence[np.ndarray],
                   fields: np.ndarray) -> GradientField:
    """Least-squares gradient of a field (or frame stack) at every node.

    ``fields`` is (n,) for one snapshot or (T, n) for a stack; with a stack
    the magnitude is the time average of per-frame gradient norms and the
    vectors are the time-mean gradients. Stencils are the 1-ring, extended
    to the 2-ring when fewer than 3 neighbors or rank-deficient; stencils
    still rank-deficient after extension get a zero gradient and a warning
    flag.
    """
    snaps = np.atleast_2d(np.asarray(fields, dtype=np.float64))
    n = points.shape[0]
    if snaps.shape[1] != n:
        raise ValueError("field length does not match node count")
    vectors = np.zeros((n, 3))
    magnitude = np.zeros(n)
    warned = np.zeros(n, dtype=bool)
    for i in range(n):
        nb = neighbors[i]
        if nb.size < 3:
            nb = _two_ring(neighbors, i)
        offsets = points[nb] - points[i]
        dp = (snaps[:, nb] - snaps[:, [i]]).T        # (k, T)
        g, rank = _stencil_solve(offsets, dp)
        if rank < 3:
            nb2 = _two_ring(neighbors, i)
            if nb2.size > nb.size:
                offsets = points[nb2] - points[i]
                dp = (snaps[:, nb2] - snaps[:, [i]]).T
                g, rank = _stencil_solve(offsets, dp)
        if rank < 3:
            warned[i] = True
            continue
        vectors[i] = g.mean(axis=1)
        magnitude[i] = float(np.linalg.norm(g, axis=0).mean())
    return GradientField(vectors, magnitude, warned)


def selection_probabilities(n: int, p_high: float, p_low: float) -> np.ndarray:
    """Keep probability by gradient rank (rank 1 = steepest).

    p(i) = p_high + (p_low - p_high) (1 - e^{-2i/n}) / (1 - e^{-2}); the
    curve decreases monotonically from ~p_high at the top ranks to exactly
    p_low at rank n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 < p_low <= p_high <= 1:
        raise ValueError("need 0 < p_low <= p_high <= 1")
    i = np.arange(1, n + 1, dtype=np.float64)
    blend = (1.0 - np.exp(-2.0 * i / n)) / (1.0 - math.exp(-2.0))
    return p_high + (p_low - p_high) * blend


@dataclass
class SelectionConfig:
    """Keep ratio plus the rank-probability endpoints and sampling seed."""

    keep_ratio: float
    p_high: float = 1.0
    p_low: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.keep_ratio <= 1:
            raise ValueError("keep_ratio must be in (0, 1]")
        if not 0 < self.p_low <= self.p_high <= 1:
            raise ValueError("need 0 < p_low <= p_high <= 1")


def sample_nodes(gradmags: np.ndarray, cfg: SelectionConfig) -> np.ndarray:
    """Seeded weighted sampling without replacement; ascending indices out."""
    gradmags = np.asarray(gradmags, dtype=np.float64)
    n = gradmags.size
    target = int(round(cfg.keep_ratio * n))
    if target > n:
        raise ValueError("target count exceeds node count")
    if target < 4:
        raise ValueError("target count below 4")
    if target == n:
        return np.arange(n, dtype=np.int64)
    order = np.argsort(-gradmags, kind="stable")
    probs = selection_probabilities(n, cfg.p_high, cfg.p_low)
    weights = np.empty(n)
    weights[order] = probs
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    chosen = rng.choice(n, size=target, replace=False, p=weights / weights.sum())
    return np.sort(chosen).astype(np.int64)


def mahalanobis_distance(x: np.ndarray, y: np.ndarray, cov: np.ndarray) -> float:
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(math.sqrt(d @ np.linalg.solve(cov, d)))


def _inv_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() <= 1e-12 * max(vals.max(), 0.0) or not np.all(np.isfinite(vals)):
        cov = cov + (1e-9 * np.trace(cov) / 3.0) * np.eye(3)
        vals, vecs = np.linalg.eigh(cov)
    return vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T


def mahalanobis_reconnect(points: np.ndarray, k: int,
                          cov: Optional[np.ndarray] = None) -> Graph:
    """k-nearest-neighbor graph under covariance-scaled distance.

    Neighbor selection uses the Mahalanobis metric (sample covariance of
    the cloud unless overridden); the surviving edges then take the usual
    exp(-d/dbar) weights on their Euclidean lengths, plus self-loops.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k + 1:
        raise ValueError("fewer points than k+1")
    s = np.cov(points.T, ddof=1) if cov is None else np.asarray(cov, dtype=np.float64)
    z = points @ _inv_sqrt(s).T
    _, idx = cKDTree(z).query(z, k=k + 1)
    pairs = set()
    for i in range(n):
        for j in idx[i]:
            j = int(j)
            if j != i:
                pairs.add((min(i, j), max(i, j)))
    pairs = np.asarray(sorted(pairs), dtype=np.int64)
    dists = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    return _weighted_graph(n, pairs, dists)


def mwls_matrix(source_points: np.ndarray, dest_points: np.ndarray,
                k_neighbors: int = 10, basis: str = "linear") -> SparseMatrix:
    """Interpolation matrix: row j maps source values to dest node j.

    Each row is a moving weighted least-squares fit over the k nearest
    source nodes with weights w = exp(-distance) and basis [1, x, y, z]
    (or [1]). The normal matrix gets a 1e-10 trace ridge on the
    non-constant coefficients when near-singular, which keeps every row
    summing to 1 exactly.
    """
    source_points = np.asarray(source_points, dtype=np.float64)
    dest_points = np.asarray(dest_points, dtype=np.float64)
    basis_size = 4 if basis == "linear" else 1
    if basis not in ("linear", "constant"):
        raise ValueError("basis must be 'linear' or 'constant'")
    if k_neighbors < basis_size:
        raise ValueError("k_neighbors below basis size")
    k = min(k_neighbors, source_points.shape[0])
    if k < basis_size:
        raise ValueError("not enough source points for the basis")
    tree = cKDTree(source_points)
    dists, idx = tree.query(dest_points, k=k)
    if k == 1:
        dists = dists[:, None]
        idx = idx[:, None]
    entries = []
    for j in range(dest_points.shape[0]):
        nb = idx[j]
        w = np.exp(-dists[j])
        if basis == "constant":
            phi = w / w.sum()
        else:
            rel = source_points[nb] - dest_points[j]
            if np.allclose(rel, 0.0) and np.allclose(rel.std(axis=0), 0.0) and k > 1:
                raise ValueError("all MWLS neighbors coincident")
            p = np.concatenate([np.ones((k, 1)), rel], axis=1)
            a = p.T @ (w[:, None] * p)
            if np.linalg.cond(a) > 1e12:
                ridge = 1e-10 * np.trace(a)
                a = a + np.diag([0.0, ridge, ridge, ridge])
            rhs = (w[:, None] * p).T
            phi = np.linalg.solve(a, rhs)[0]
        for col, val in zip(nb.tolist(), phi.tolist()):
            entries.append((j, col, val))
    # merge duplicate columns (possible when k exceeds distinct neighbors)
    merged = {}
    for i, jcol, v in entries:
        merged[(i, jcol)] = merged.get((i, jcol), 0.0) + v
    return SparseMatrix(dest_points.shape[0], source_points.shape[0],
                        [(i, j, v) for (i, j), v in merged.items()])


@dataclass
class PooledLevel:
    """One coarsening step: kept indices, their graph, and both interpolants."""

    indices: np.ndarray          # into the parent level, strictly increasing
    graph: Graph
    pool: SparseMatrix           # parent -> this level
    unpool: SparseMatrix         # this level -> parent

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.size and np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        self.indices = idx

    @property
    def n_nodes(self) -> int:
        return self.indices.size


@dataclass
class ReductionHierarchy:
    """Two pooled levels under a fine mesh graph."""

    n_fine: int
    levels: List[PooledLevel]

    def __post_init__(self):
        sizes = [self.n_fine] + [lv.n_nodes for lv in self.levels]
        if any(b >= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("level sizes must shrink monotonically")

    @property
    def sizes(self) -> List[int]:
        return [self.n_fine] + [lv.n_nodes for lv in self.levels]


def build_hierarchy(mesh: SurfaceMesh, fields: np.ndarray,
                    configs: Sequence[SelectionConfig],
                    knn: int = 6, mwls_k: int = 10,
                    graph: Optional[Graph] = None) -> ReductionHierarchy:
    """Stack pooled levels: select, reconnect, interpolate both directions.

    ``fields`` feeds the gradient-magnitude ranking (a snapshot or a frame
    stack, typically the training pressure history); deeper levels reuse
    the surviving nodes' magnitudes.
    """
    if graph is None:
        graph = graph_from_mesh(mesh)
    gradmag = node_gradients(mesh.points, graph.neighbor_lists(), fields).magnitude
    levels: List[PooledLevel] = []
    points = mesh.points
    for cfg in configs:
        idx = sample_nodes(gradmag, cfg)
        kept = points[idx]
        sub_graph = mahalanobis_reconnect(kept, knn)
        pool = mwls_matrix(points, kept, mwls_k)
        unpool = mwls_matrix(kept, points, mwls_k)
        levels.append(PooledLevel(idx, sub_graph, pool, unpool))
        points = kept
        gradmag = gradmag[idx]
    return ReductionHierarchy(mesh.n_nodes, levels)


def _write_indices(fh, idx: np.ndarray) -> None:
    fh.write(struct.pack("<Q", idx.size))
    fh.write(idx.astype("<i8").tobytes())


def _read_indices(fh) -> np.ndarray:
    (count,) = struct.unpack("<Q", fh.read(8))
    return np.frombuffer(fh.read(8 * count), dtype="<i8").astype(np.int64)


def _write_coo(fh, m: SparseMatrix) -> None:
    fh.write(struct.pack("<QQQ", m.rows, m.cols, m.nnz))
    pairs = np.stack([m.row_idx, m.col_idx], axis=1)
    fh.write(pairs.astype("<i8").tobytes())
    fh.write(m.values.astype("<f8").tobytes())


def _read_coo(fh) -> SparseMatrix:
    rows, cols, nnz = struct.unpack("<QQQ", fh.read(24))
    pairs = np.frombuffer(fh.read(16 * nnz), dtype="<i8").reshape(nnz, 2)
    vals = np.frombuffer(fh.read(8 * nnz), dtype="<f8")
    return SparseMatrix(rows, cols,
                        list(zip(pairs[:, 0].tolist(), pairs[:, 1].tolist(),
                                 vals.tolist())))


def save_hierarchy(h: ReductionHierarchy, stem,
                   configs: Optional[Sequence[SelectionConfig]] = None) -> None:
    stem = str(stem)
    manifest = {
        "n_fine": h.n_fine,
        "sizes": h.sizes,
        "levels": len(h.levels),
        "configs": [
            {"keep_ratio": c.keep_ratio, "p_high": c.p_high,
             "p_low": c.p_low, "seed": c.seed}
            for c in (configs or [])
        ],
    }
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    with open(stem + ".bin", "wb") as fh:
        for lv in h.levels:
            _write_indices(fh, lv.indices)
            _write_coo(fh, lv.graph.adjacency())
            _write_coo(fh, lv.pool)
            _write_coo(fh, lv.unpool)


def load_hierarchy(stem) -> ReductionHierarchy:
    stem = str(stem)
    with open(stem + ".json") as fh:
        manifest = json.load(fh)
    levels = []
    with open(stem + ".bin", "rb") as fh:
        for _ in range(manifest["levels"]):
            idx = _read_indices(fh)
            adj = _read_coo(fh)
            pairs = np.stack([adj.row_idx, adj.col_idx], axis=1)
            graph = Graph(adj.rows, pairs, adj.values.copy())
            pool = _read_coo(fh)
            unpool = _read_coo(fh)
            levels.append(PooledLevel(idx, graph, pool, unpool))
    return ReductionHierarchy(manifest["n_fine"], levels)
