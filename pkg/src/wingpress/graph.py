"""Surface meshes, their graphs, and the spectral operators built on them.

A mesh's 1-ring connectivity becomes a weighted graph whose edge weights
decay with distance, w_ij = exp(-d_ij / dbar) with dbar the mean edge
length, so weights live in (0, 1] and self-loops get exp(0) = 1. From the
graph we derive the symmetric degree-normalized convolution operator and
the rescaled-Laplacian operator used by Chebyshev polynomial filters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .autodiff import SparseMatrix, Tensor


@dataclass
class SurfaceMesh:
    """Triangulated surface with per-node areas and unit outward normals.

    node_area is one third of the summed incident triangle areas;
    node_normal is the area-weighted mean of incident triangle normals,
    normalized to unit length.
    """

    points: np.ndarray          # (N, 3)
    triangles: np.ndarray       # (T, 3) int
    node_area: np.ndarray = field(init=False)
    node_normal: np.ndarray = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        n = self.points.shape[0]
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle index out of range")
        counts = np.zeros(n, dtype=np.int64)
        np.add.at(counts, self.triangles.reshape(-1), 1)
        if np.any(counts == 0):
            raise ValueError("mesh has nodes that belong to no triangle")
        p0 = self.points[self.triangles[:, 0]]
        p1 = self.points[self.triangles[:, 1]]
        p2 = self.points[self.triangles[:, 2]]
        cross = np.cross(p1 - p0, p2 - p0)
        tri_area = 0.5 * np.linalg.norm(cross, axis=1)
        if np.any(tri_area <= 0):
            raise ValueError("degenerate (zero-area) triangle")
        area = np.zeros(n)
        normal = np.zeros((n, 3))
        for k in range(3):
            np.add.at(area, self.triangles[:, k], tri_area / 3.0)
            np.add.at(normal, self.triangles[:, k], cross)
        norms = np.linalg.norm(normal, axis=1)
        if np.any(norms == 0):
            raise ValueError("node with vanishing aggregate normal")
        self.node_area = area
        self.node_normal = normal / norms[:, None]

    @property
    def n_nodes(self) -> int:
        return self.points.shape[0]

    def total_area(self) -> float:
        return float(self.node_area.sum())


def save_mesh(mesh: SurfaceMesh, path) -> None:
    payload = {"points": mesh.points.tolist(), "triangles": mesh.triangles.tolist()}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def load_mesh(path) -> SurfaceMesh:
    with open(path) as fh:
        payload = json.load(fh)
    return SurfaceMesh(np.asarray(payload["points"], dtype=np.float64),
                       np.asarray(payload["triangles"], dtype=np.int64))


@dataclass
class Graph:
    """Symmetric weighted graph with one weight-1 self-loop per node.

    edges holds directed COO pairs including self-loops; weights lie in
    (0, 1].
    """

    n_nodes: int
    edges: np.ndarray       # (E, 2) int, directed pairs incl. self-loops
    weights: np.ndarray     # (E,)

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if np.any(self.weights <= 0) or np.any(self.weights > 1):
            raise ValueError("edge weight outside (0, 1]")
        loops = self.edges[:, 0] == self.edges[:, 1]
        loop_nodes = self.edges[loops, 0]
        if np.unique(loop_nodes).size != self.n_nodes or loop_nodes.size != self.n_nodes:
            raise ValueError("expected exactly one self-loop per node")
        if not np.allclose(self.weights[loops], 1.0):
            raise ValueError("self-loop weight must be 1")

    def adjacency(self) -> SparseMatrix:
        return SparseMatrix(self.n_nodes, self.n_nodes,
                            list(zip(self.edges[:, 0].tolist(),
                                     self.edges[:, 1].tolist(),
                                     self.weights.tolist())),
                            symmetric=True)

    def neighbor_lists(self, include_self: bool = False) -> List[np.ndarray]:
        """Per-node neighbor indices (self-loops dropped unless asked)."""
        out: List[List[int]] = [[] for _ in range(self.n_nodes)]
        for (i, j) in self.edges:
            if i == j and not include_self:
                continue
            out[i].append(int(j))
        return [np.asarray(sorted(set(nb)), dtype=np.int64) for nb in out]


def _weighted_graph(n: int, pairs: np.ndarray, dists: np.ndarray) -> Graph:
    """Shared weight law: w = exp(-d/dbar) on symmetrized pairs + self-loops."""
    if pairs.size == 0:
        raise ValueError("graph with no edges")
    dbar = float(dists.mean())
    if dbar <= 0:
        raise ValueError("degenerate geometry: mean edge length is zero")
    w = np.exp(-dists / dbar)
    edges = np.concatenate([pairs, pairs[:, ::-1],
                            np.stack([np.arange(n)] * 2, axis=1)])
    weights = np.concatenate([w, w, np.ones(n)])
    return Graph(n, edges, weights)


def graph_from_mesh(mesh: SurfaceMesh) -> Graph:
    """1-ring connectivity with distance-decay weights in (0, 1]."""
    tri = mesh.triangles
    raw = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    canon = np.sort(raw, axis=1)
    pairs = np.unique(canon, axis=0)
    dists = np.linalg.norm(mesh.points[pairs[:, 0]] - mesh.points[pairs[:, 1]], axis=1)
    return _weighted_graph(mesh.n_nodes, pairs, dists)


@dataclass
class GcnOperator:
    """Symmetric degree-normalized propagation operator."""

    matrix: SparseMatrix

    @property
    def n_nodes(self) -> int:
        return self.matrix.rows


def gcn_normalize(g: Graph) -> GcnOperator:
    """Entry (i, j) = w_ij / sqrt(d_i d_j), degrees taken over loop-augmented weights."""
    deg = np.zeros(g.n_nodes)
    np.add.at(deg, g.edges[:, 0], g.weights)
    assert np.all(deg > 0), "self-loops guarantee positive degrees"
    inv_sqrt = 1.0 / np.sqrt(deg)
    vals = g.weights * inv_sqrt[g.edges[:, 0]] * inv_sqrt[g.edges[:, 1]]
    m = SparseMatrix(g.n_nodes, g.n_nodes,
                     list(zip(g.edges[:, 0].tolist(), g.edges[:, 1].tolist(),
                              vals.tolist())),
                     symmetric=True)
    return GcnOperator(m)


def _power_iteration_lmax(m: SparseMatrix, iters: int = 100, tol: float = 1e-6,
                          seed: int = 0) -> Tuple[float, bool]:
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.standard_normal(m.cols)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = m.apply(v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0, True
        w /= nw
        lam_new = float(w @ m.apply(w))
        if abs(lam_new - lam) < tol:
            return lam_new, True
        lam = lam_new
        v = w
    return lam, False


def spectral_radius(op: GcnOperator, iters: int = 200, seed: int = 0) -> float:
    lam, _ = _power_iteration_lmax(op.matrix, iters=iters, seed=seed)
    return abs(lam)


@dataclass
class ChebOperator:
    """Rescaled Laplacian 2L/lambda_max - I with the polynomial order K."""

    matrix: SparseMatrix
    order: int
    lambda_max: float

    @property
    def n_nodes(self) -> int:
        return self.matrix.rows


def cheb_operator(g: Graph, order: int) -> ChebOperator:
    """Symmetric normalized Laplacian, rescaled so eigenvalues land in [-1, 1].

    lambda_max comes from 100-iteration power iteration (tol 1e-6); the
    normalized Laplacian's upper bound 2 is the fallback when it does not
    converge.
    """
    if order < 1:
        raise ValueError("Chebyshev order must be >= 1")
    norm = gcn_normalize(g).matrix
    n = g.n_nodes
    lap_entries = {}
    for i, j, v in norm.entries():
        lap_entries[(i, j)] = -v
    for i in range(n):
        lap_entries[(i, i)] = lap_entries.get((i, i), 0.0) + 1.0
    lap = SparseMatrix(n, n, [(i, j, v) for (i, j), v in lap_entries.items()])
    lam, converged = _power_iteration_lmax(lap)
    if not converged or lam <= 0:
        lam = 2.0
    scaled = {}
    for i, j, v in lap.entries():
        scaled[(i, j)] = 2.0 * v / lam
    for i in range(n):
        scaled[(i, i)] = scaled.get((i, i), 0.0) - 1.0
    mat = SparseMatrix(n, n, [(i, j, v) for (i, j), v in scaled.items()])
    return ChebOperator(mat, order, lam)


def cheb_apply(op: ChebOperator, x: Tensor, coeffs: Tensor) -> Tensor:
    """Sum_k theta_k T_k(L~) x via the three-term recursion."""
    theta = coeffs.data.reshape(-1)
    if theta.size != op.order:
        raise ValueError("coefficient count must equal the operator order")
    t_prev = x.data
    out = theta[0] * t_prev
    if op.order > 1:
        t_cur = op.matrix.apply(t_prev)
        out = out + theta[1] * t_cur
        for k in range(2, op.order):
            t_next = 2.0 * op.matrix.apply(t_cur) - t_prev
            out = out + theta[k] * t_next
            t_prev, t_cur = t_cur, t_next
    return Tensor(out)
