"""Robust rotation averaging over a pose graph.

Relative measurements follow ``R_j ~ M_ij R_i``. Solving runs an l1
initialization, then reweighted least squares in the tangent space, and
prunes edges whose residual exceeds the spectral angular bound.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DisconnectedGraph
from .geometry import batch_exp, batch_log, batch_rotation_angles

ACTIVE = "active"
REPLACED = "replaced"


@dataclass
class RotEdge:
    i: int
    j: int
    measurement: np.ndarray
    status: str = ACTIVE


@dataclass
class RotGraph:
    """Vertices are frame ids with rotation estimates (None until solved)."""

    vertices: list
    edges: list
    gauge: int
    rotations: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = list(self.vertices)
        self._index = {v: k for k, v in enumerate(self.vertices)}
        if self.gauge not in self._index:
            raise ValueError("gauge vertex not in graph")
        if self.gauge not in self.rotations:
            self.rotations[self.gauge] = np.eye(3)

    def index(self, v) -> int:
        return self._index[v]

    def active_edges(self) -> list:
        return [e for e in self.edges if e.status == ACTIVE]

    def arrays(self):
        I = np.array([self._index[e.i] for e in self.edges], dtype=int)
        J = np.array([self._index[e.j] for e in self.edges], dtype=int)
        M = np.array([e.measurement for e in self.edges]).reshape(-1, 3, 3)
        active = np.array([e.status == ACTIVE for e in self.edges], dtype=bool)
        return I, J, M, active

    def stack(self, rotations=None) -> np.ndarray:
        rotations = self.rotations if rotations is None else rotations
        return np.array([rotations[v] for v in self.vertices])

    def unstack(self, Rs) -> dict:
        return {v: Rs[k].copy() for k, v in enumerate(self.vertices)}


@dataclass
class PruneReport:
    iteration: int
    replaced_edges: list
    alpha_max: float


@dataclass
class Certificate:
    optimal: bool
    max_alpha: float
    alpha_max: float
    last_update: float = 0.0
    note: str = ""


@dataclass
class RotAvgParams:
    irls_tol: float = 1e-6
    irls_max_iters: int = 100
    l1_max_iters: int = 5
    weight_floor: float = 1e-5
    alpha_cap: float = np.radians(45.0)
    prune_rounds: int = 3
    replaced_weight: float = 1e-6


@dataclass
class IrlsResult:
    rotations: dict
    iterations: int
    last_update: float
    converged: bool


@dataclass
class RotAvgResult:
    rotations: dict
    reports: list
    irls: list
    certificate: Certificate

    @property
    def converged(self) -> bool:
        return all(r.converged for r in self.irls)

    @property
    def replaced_count(self) -> int:
        return sum(len(r.replaced_edges) for r in self.reports)


def laplacian(graph: RotGraph, active_only: bool = True) -> np.ndarray:
    """Unweighted Laplacian; parallel edges count once, self-loops are ignored."""
    n = len(graph.vertices)
    A = np.zeros((n, n), dtype=bool)
    for e in (graph.active_edges() if active_only else graph.edges):
        a, b = graph.index(e.i), graph.index(e.j)
        if a != b:
            A[a, b] = A[b, a] = True
    A = A.astype(float)
    return np.diag(A.sum(axis=1)) - A


def fiedler_value(graph: RotGraph) -> float:
    if len(graph.vertices) < 2:
        raise DisconnectedGraph("Fiedler value needs at least two vertices")
    lam = float(np.linalg.eigvalsh(laplacian(graph))[1])
    if lam < 1e-12:
        raise DisconnectedGraph("active edges leave the graph disconnected")
    return lam


def max_degree(graph: RotGraph) -> int:
    return int(np.max(np.diag(laplacian(graph))))


def alpha_max(graph: RotGraph, cap: float | None = None) -> float:
    """Spectral bound on edge residual angles; ``cap`` gives the pruning threshold."""
    lam2 = fiedler_value(graph)
    d = max_degree(graph)
    raw = 2.0 * np.arcsin(np.sqrt(0.25 + lam2 / (2.0 * d)) - 0.5)
    return float(raw if cap is None else min(raw, cap))


def residual_angles(graph: RotGraph, rotations: dict) -> np.ndarray:
    """Angle between M_ij R_i and R_j for every edge, in edge order."""
    I, J, M, _ = graph.arrays()
    Rs = graph.stack(rotations)
    return batch_rotation_angles(M @ Rs[I] @ np.transpose(Rs[J], (0, 2, 1)))


def objective(graph: RotGraph, rotations: dict, metric: str = "chordal") -> float:
    """Averaging cost over active edges (replaced ones contribute zero)."""
    I, J, M, active = graph.arrays()
    if not active.any():
        return 0.0
    Rs = graph.stack(rotations)
    if metric == "chordal":
        D = M[active] @ Rs[I[active]] - Rs[J[active]]
        return float(np.sum(np.linalg.norm(D, axis=(1, 2))))
    if metric == "angular":
        return float(np.sum(residual_angles(graph, rotations)[active]))
    raise ValueError(f"unknown metric {metric!r}")


def _bfs_tree(graph: RotGraph):
    adj = {v: [] for v in graph.vertices}
    for e in graph.edges:
        adj[e.i].append(e)
        adj[e.j].append(e)
    out = {graph.gauge: graph.rotations[graph.gauge]}
    q = deque([graph.gauge])
    while q:
        v = q.popleft()
        for e in adj[v]:
            w = e.j if e.i == v else e.i
            if w in out:
                continue
            out[w] = e.measurement @ out[v] if e.i == v else e.measurement.T @ out[v]
            q.append(w)
    if len(out) != len(graph.vertices):
        raise DisconnectedGraph(f"{len(graph.vertices) - len(out)} vertices unreachable")
    return out


def _edge_weights(graph, active, residuals, params):
    w = 1.0 / np.maximum(residuals, params.weight_floor)
    return np.where(active, w, params.replaced_weight)


def _weighted_cost(residuals, active, params):
    c = np.where(active, 1.0, params.replaced_weight)
    return float(np.sum(c * residuals))


def _tangent_step(graph, Rs, I, J, M, w, g):
    """Weighted least-squares step for r_e + M_e w_i - w_j over all vertices."""
    n = len(Rs)
    E = M @ Rs[I] @ np.transpose(Rs[J], (0, 2, 1))
    r = batch_log(E)
    H = np.zeros((n, 3, n, 3))
    b = np.zeros((n, 3))
    eye = np.eye(3)
    np.add.at(H, (I, slice(None), I, slice(None)), w[:, None, None] * eye)
    np.add.at(H, (J, slice(None), J, slice(None)), w[:, None, None] * eye)
    MT = np.transpose(M, (0, 2, 1))
    np.add.at(H, (I, slice(None), J, slice(None)), -w[:, None, None] * MT)
    np.add.at(H, (J, slice(None), I, slice(None)), -w[:, None, None] * M)
    np.add.at(b, I, w[:, None] * np.einsum("eba,eb->ea", M, r))
    np.add.at(b, J, -w[:, None] * r)
    H = H.reshape(3 * n, 3 * n)
    keep = np.ones(3 * n, dtype=bool)
    keep[3 * g:3 * g + 3] = False
    x = np.zeros(3 * n)
    x[keep] = np.linalg.solve(H[np.ix_(keep, keep)], -b.reshape(-1)[keep])
    return x.reshape(n, 3)


def _descend(graph, Rs, I, J, M, active, weights, g, cost_of):
    """One safeguarded step; returns new stack, max update angle, new cost."""
    step = _tangent_step(graph, Rs, I, J, M, weights, g)
    cost0 = cost_of(Rs)
    scale = 1.0
    for _ in range(30):
        trial = batch_exp(scale * step) @ Rs
        trial[g] = Rs[g]
        c = cost_of(trial)
        if c <= cost0 + 1e-12:
            return trial, float(np.max(np.linalg.norm(scale * step, axis=1))), c
        scale *= 0.5
    return Rs, 0.0, cost0


def l1ra_init(graph: RotGraph, max_iters: int = 5, params: RotAvgParams | None = None) -> dict:
    """Spanning-tree chaining followed by a few l1 (Weiszfeld) sweeps."""
    params = params or RotAvgParams()
    tree = _bfs_tree(graph)
    Rs = graph.stack(tree)
    if not graph.edges:
        return graph.unstack(Rs)
    I, J, M, active = graph.arrays()
    g = graph.index(graph.gauge)

    def cost_of(S):
        res = batch_rotation_angles(M @ S[I] @ np.transpose(S[J], (0, 2, 1)))
        return _weighted_cost(res, active, params)

    for _ in range(max_iters):
        res = batch_rotation_angles(M @ Rs[I] @ np.transpose(Rs[J], (0, 2, 1)))
        w = _edge_weights(graph, active, res, params)
        Rs, upd, _ = _descend(graph, Rs, I, J, M, active, w, g, cost_of)
        if upd == 0.0:
            break
    return graph.unstack(Rs)


def irls_solve(graph: RotGraph, init: dict, params: RotAvgParams | None = None) -> IrlsResult:
    """Minimize the summed residual angles by l1 reweighting.

    The weighted objective is monotone non-increasing; iteration stops once
    the largest per-vertex update falls below ``irls_tol``.
    """
    params = params or RotAvgParams()
    Rs = graph.stack(init)
    g = graph.index(graph.gauge)
    Rs[g] = graph.rotations[graph.gauge]
    if not graph.edges:
        return IrlsResult(graph.unstack(Rs), 0, 0.0, True)
    I, J, M, active = graph.arrays()

    def cost_of(S):
        res = batch_rotation_angles(M @ S[I] @ np.transpose(S[J], (0, 2, 1)))
        return _weighted_cost(res, active, params)

    upd = np.inf
    it = 0
    for it in range(1, params.irls_max_iters + 1):
        res = batch_rotation_angles(M @ Rs[I] @ np.transpose(Rs[J], (0, 2, 1)))
        w = _edge_weights(graph, active, res, params)
        Rs, upd, _ = _descend(graph, Rs, I, J, M, active, w, g, cost_of)
        if upd < params.irls_tol:
            break
    converged = upd < params.irls_tol or upd <= 1e-3
    return IrlsResult(graph.unstack(Rs), it, upd, converged)


def prune_edges(graph: RotGraph, rotations: dict, threshold: float | None = None,
                iteration: int = 0, cap: float = np.radians(45.0)) -> PruneReport:
    """Replace active edges whose residual angle exceeds the threshold.

    A replaced edge takes the relative rotation implied by ``rotations`` so
    its residual is exactly zero; the edge stays in the graph.
    """
    if threshold is None:
        threshold = alpha_max(graph, cap)
    res = residual_angles(graph, rotations)
    replaced = []
    for e, a in zip(graph.edges, res):
        if e.status == ACTIVE and a > threshold:
            e.measurement = rotations[e.j] @ rotations[e.i].T
            e.status = REPLACED
            replaced.append((e.i, e.j, float(a)))
    return PruneReport(iteration, replaced, float(threshold))


def certify_global_optimality(graph: RotGraph, rotations: dict,
                              last_update: float = 0.0) -> Certificate:
    """Check every active residual against the uncapped spectral bound."""
    act = np.array([e.status == ACTIVE for e in graph.edges], dtype=bool)
    if not act.any():
        return Certificate(True, 0.0, np.nan, last_update, "all constraints removed")
    res = residual_angles(graph, rotations)[act]
    try:
        bound = alpha_max(graph)
    except DisconnectedGraph:
        return Certificate(False, float(res.max()), 0.0, last_update,
                           "active edges disconnected")
    m = float(res.max())
    return Certificate(m <= bound, m, bound, last_update)


def rotation_averaging(graph: RotGraph, params: RotAvgParams | None = None,
                       prune: bool = True) -> RotAvgResult:
    """l1 start, then up to ``prune_rounds`` rounds of IRLS followed by pruning."""
    params = params or RotAvgParams()
    rotations = l1ra_init(graph, params.l1_max_iters, params)
    reports, runs = [], []
    rounds = params.prune_rounds if prune else 1
    for k in range(1, max(rounds, 1) + 1):
        run = irls_solve(graph, rotations, params)
        runs.append(run)
        rotations = run.rotations
        if not prune:
            break
        try:
            threshold = alpha_max(graph, params.alpha_cap)
        except DisconnectedGraph:
            break
        rep = prune_edges(graph, rotations, threshold, iteration=k)
        reports.append(rep)
        if not rep.replaced_edges:
            break
    cert = certify_global_optimality(graph, rotations, runs[-1].last_update)
    graph.rotations.update(rotations)
    return RotAvgResult(rotations, reports, runs, cert)
