"""Per-frame deformation estimation.

Rigid projective ICP gives the global pose; the non-rigid solve then
alternates displacements (linear least squares, PCG), per-node rotations
(SVD) and per-edge line-process weights (closed form) over the EDG.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation

from .meshing import CanonicalMesh, vertex_normals
from .tsdf_volume import DepthFrame
from .warp_field import DeformGraph, GlobalPose, interpolation_weights, warp_points

log = logging.getLogger(__name__)


class DegeneratePoseError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    w_sparse: float = 1.0
    w_dense: float = 1.0
    w_reg: float = 0.1
    mu: float | None = None  # squared length; None -> (0.2 * cell)^2
    max_outer_sweeps: int = 20
    pcg_tol: float = 1e-5
    pcg_max_iters: int = 200
    energy_rel_tol: float = 1e-6
    icp_iters: int = 10
    corr_dist_max: float = 0.02
    corr_normal_max_angle: float = np.deg2rad(45.0)

    def __post_init__(self):
        if min(self.w_sparse, self.w_dense, self.w_reg) < 0:
            raise ValueError("term weights must be non-negative")
        if self.pcg_tol <= 0 or self.energy_rel_tol <= 0 or self.corr_dist_max <= 0:
            raise ValueError("tolerances must be positive")
        if self.mu is not None and self.mu <= 0:
            raise ValueError("mu must be positive")

    def mu_for(self, graph: DeformGraph) -> float:
        return self.mu if self.mu is not None else (0.2 * graph.spacing) ** 2


@dataclass
class CorrespondenceSet:
    """Dense point-to-plane pairs and optional sparse point-to-point pairs.

    Source points are canonical positions with the EDG cell they are warped by.
    """
    points: np.ndarray
    cells: np.ndarray
    targets: np.ndarray
    normals: np.ndarray
    source_index: np.ndarray
    sparse_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sparse_cells: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    sparse_targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        self.source_index = np.asarray(self.source_index, dtype=np.int64)
        if len(self.normals):
            norm = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norm - 1.0) > 1e-9):
                raise ValueError("correspondence normals must be unit length")

    @property
    def n_dense(self) -> int:
        return len(self.points)

    @property
    def n_sparse(self) -> int:
        return len(self.sparse_points)

    def with_sparse(self, points, cells, targets) -> "CorrespondenceSet":
        return CorrespondenceSet(self.points, self.cells, self.targets, self.normals, self.source_index,
                                 np.asarray(points, float).reshape(-1, 3),
                                 np.asarray(cells, np.int64), np.asarray(targets, float).reshape(-1, 3))


@dataclass
class DeformationState:
    pose: GlobalPose
    edges: np.ndarray
    l: np.ndarray
    telemetry: list = field(default_factory=list)
    flagged_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    correspondences: CorrespondenceSet | None = None

    def __post_init__(self):
        if len(self.l) and (np.min(self.l) < 0 or np.max(self.l) > 1):
            raise ValueError("line process weights must lie in [0, 1]")

    def edge_weights(self) -> dict:
        return {(int(a), int(b)): float(w) for (a, b), w in zip(self.edges, self.l)}


# -- correspondences ---------------------------------------------------------

def find_dense_correspondences(live_points: np.ndarray, live_normals: np.ndarray | None,
                               frame: DepthFrame, config: SolverConfig,
                               points_xyz: np.ndarray | None = None,
                               frame_normals: np.ndarray | None = None):
    """Projective association of live-frame points with the depth map.

    Returns ``(source indices, target points, target normals)``.
    """
    live_points = np.asarray(live_points, dtype=float).reshape(-1, 3)
    if len(live_points) == 0:
        return np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros((0, 3))
    xyz = frame.backproject() if points_xyz is None else points_xyz
    nrm = frame.normals() if frame_normals is None else frame_normals
    u, v, ok = frame.project(live_points)
    idx = np.flatnonzero(ok)
    ui, vi = u[idx], v[idx]
    y = xyz[vi, ui]
    n = nrm[vi, ui]
    good = frame.valid[vi, ui] & (np.linalg.norm(n, axis=1) > 0.5)
    good &= np.linalg.norm(y - live_points[idx], axis=1) <= config.corr_dist_max
    if live_normals is not None:
        ln = live_normals[idx]
        has = np.linalg.norm(ln, axis=1) > 0.5
        cosang = np.sum(ln * n, axis=1)
        good &= ~has | (cosang >= np.cos(config.corr_normal_max_angle))
    idx, y, n = idx[good], y[good], n[good]
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    return idx, y, n


def mesh_correspondences(mesh: CanonicalMesh, graph: DeformGraph, pose: GlobalPose,
                         frame: DepthFrame, config: SolverConfig) -> CorrespondenceSet:
    live = warp_points(mesh.vertices, mesh.edg_cell, graph, pose)
    normals = vertex_normals(live, mesh.triangles)
    idx, y, n = find_dense_correspondences(live, normals, frame, config)
    return CorrespondenceSet(mesh.vertices[idx], mesh.edg_cell[idx], y, n, idx)


# -- rigid ICP ---------------------------------------------------------------

def _point_to_plane_error(p, y, n) -> float:
    return float(np.mean(np.sum(n * (p - y), axis=1) ** 2))


def rigid_icp(mesh: CanonicalMesh, graph: DeformGraph, pose: GlobalPose, frame: DepthFrame,
              config: SolverConfig, damping: float = 1e-9) -> GlobalPose:
    """Refine the global pose against ``frame`` with the non-rigid field held fixed."""
    if mesh.n_vertices == 0:
        raise DegeneratePoseError("empty mesh")
    shifted = warp_points(mesh.vertices, mesh.edg_cell, graph, GlobalPose.identity())
    xyz, nrm = frame.backproject(), frame.normals()
    current = previous = pose.copy()
    best_err = None
    for _ in range(config.icp_iters):
        live = current.apply(shifted)
        normals = vertex_normals(live, mesh.triangles)
        idx, y, n = find_dense_correspondences(live, normals, frame, config, xyz, nrm)
        if len(idx) < 6:
            raise DegeneratePoseError(f"only {len(idx)} valid correspondences")
        p = live[idx]
        err = _point_to_plane_error(p, y, n)
        if best_err is not None and err > best_err:
            current = previous
            break
        best_err = err
        A = np.hstack([np.cross(p, n), n])
        b = np.sum(n * (y - p), axis=1)
        H = A.T @ A + damping * np.eye(6)
        x = np.linalg.solve(H, A.T @ b)
        dR = Rotation.from_rotvec(x[:3]).as_matrix()
        previous = current
        current = GlobalPose(dR, x[3:]).compose(current)
        if np.linalg.norm(x) < 1e-10:
            break
    return current


# -- energy ------------------------------------------------------------------

def _rest_differences(graph: DeformGraph, edges: np.ndarray) -> np.ndarray:
    pos = graph.positions
    return pos[edges[:, 0]] - pos[edges[:, 1]]


def regularizer_residuals(graph: DeformGraph, edges: np.ndarray, t=None, R=None) -> np.ndarray:
    """``R_i (g_i - g_j) - (g~_i - g~_j)`` per edge, ``i`` the owner."""
    t = graph.t if t is None else t
    R = graph.R if R is None else R
    i, j = edges[:, 0], edges[:, 1]
    d = _rest_differences(graph, edges)
    return np.einsum("eab,eb->ea", R[i], d) - d - (t[i] - t[j])


def energy_total(graph: DeformGraph, pose: GlobalPose, corr: CorrespondenceSet, edges: np.ndarray,
                 l: np.ndarray, config: SolverConfig, t=None, R=None):
    """``(E_total, E_spr, E_dense, E_reg)`` at the given state."""
    t = graph.t if t is None else t
    mu = config.mu_for(graph)
    e_dense = 0.0
    if corr.n_dense:
        live = warp_points(corr.points, corr.cells, graph, pose, t=t)
        r = np.sum(corr.normals * (live - corr.targets), axis=1)
        e_dense = float(np.sum(r**2) / corr.n_dense)
    e_spr = 0.0
    if corr.n_sparse:
        live = warp_points(corr.sparse_points, corr.sparse_cells, graph, pose, t=t)
        e_spr = float(np.sum((live - corr.sparse_targets) ** 2))
    e_reg = 0.0
    if len(edges):
        res = regularizer_residuals(graph, edges, t, R)
        e_reg = float(np.sum(l * np.sum(res**2, axis=1)) + mu * np.sum((np.sqrt(l) - 1.0) ** 2))
    total = config.w_sparse * e_spr + config.w_dense * e_dense + config.w_reg * e_reg
    return total, e_spr, e_dense, e_reg


def build_displacement_system(graph: DeformGraph, pose: GlobalPose, corr: CorrespondenceSet,
                              edges: np.ndarray, l: np.ndarray, config: SolverConfig, R=None):
    """Weighted linear system ``J t + b`` whose squared norm is the t-dependent energy."""
    R = graph.R if R is None else R
    n_var = 3 * graph.n_nodes
    rows, cols, vals, rhs = [], [], [], []
    n_rows = 0
    if corr.n_dense:
        sw = np.sqrt(config.w_dense / corr.n_dense)
        nodes, w = interpolation_weights(corr.points, corr.cells, graph)
        rn = corr.normals @ pose.R  # rows are (R^T n)^T
        m = corr.n_dense
        r_idx = np.repeat(np.arange(m), 24)
        c_idx = (3 * nodes[:, :, None] + np.arange(3)).reshape(m, 24)
        v = (w[:, :, None] * rn[:, None, :]).reshape(m, 24) * sw
        rows.append(r_idx + n_rows)
        cols.append(c_idx.ravel())
        vals.append(v.ravel())
        base = corr.points @ pose.R.T + pose.t - corr.targets
        rhs.append(sw * np.sum(corr.normals * base, axis=1))
        n_rows += m
    if corr.n_sparse:
        sw = np.sqrt(config.w_sparse)
        nodes, w = interpolation_weights(corr.sparse_points, corr.sparse_cells, graph)
        m = corr.n_sparse
        # row (p, a) couples to column (node c, b) with w_c * R[a, b]
        pr = np.arange(m)[:, None, None, None]
        a = np.arange(3)[None, None, :, None]
        b = np.arange(3)[None, None, None, :]
        node = nodes[:, :, None, None]
        r_idx = np.broadcast_to(3 * pr + a, (m, 8, 3, 3))
        c_idx = np.broadcast_to(3 * node + b, (m, 8, 3, 3))
        v = sw * w[:, :, None, None] * pose.R[None, None]
        rows.append(r_idx.ravel() + n_rows)
        cols.append(c_idx.ravel())
        vals.append(v.ravel())
        base = corr.sparse_points @ pose.R.T + pose.t - corr.sparse_targets
        rhs.append(sw * base.ravel())
        n_rows += 3 * m
    if len(edges):
        e = len(edges)
        sw = np.sqrt(config.w_reg * l)
        i, j = edges[:, 0], edges[:, 1]
        r_idx = 3 * np.arange(e)[:, None] + np.arange(3)
        rows += [(r_idx + n_rows).ravel(), (r_idx + n_rows).ravel()]
        cols += [(3 * i[:, None] + np.arange(3)).ravel(), (3 * j[:, None] + np.arange(3)).ravel()]
        vals += [np.repeat(-sw, 3), np.repeat(sw, 3)]
        d = _rest_differences(graph, edges)
        base = np.einsum("eab,eb->ea", R[i], d) - d
        rhs.append((sw[:, None] * base).ravel())
        n_rows += 3 * e
    if n_rows == 0:
        return sp.csr_matrix((0, n_var)), np.zeros(0)
    J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_rows, n_var))
    return J, np.concatenate(rhs)


def energy_gradient_t(graph, pose, corr, edges, l, config, t=None) -> np.ndarray:
    """Analytic gradient of E_total with respect to the stacked displacements."""
    t = graph.t if t is None else t
    J, b = build_displacement_system(graph, pose, corr, edges, l, config)
    return (2.0 * J.T @ (J @ t.ravel() + b)).reshape(-1, 3)


# -- step 1: displacements -----------------------------------------------------

@dataclass
class PcgResult:
    x: np.ndarray
    iterations: int
    rel_residual: float
    converged: bool


def pcg(A, rhs: np.ndarray, tol: float, max_iters: int) -> PcgResult:
    """Jacobi-preconditioned conjugate gradient started from zero."""
    x = np.zeros_like(rhs)
    diag = A.diagonal()
    inv = np.where(diag > 0, 1.0 / np.where(diag > 0, diag, 1.0), 0.0)
    r = rhs.copy()
    norm_b = np.linalg.norm(rhs)
    if norm_b == 0:
        return PcgResult(x, 0, 0.0, True)
    z = inv * r
    p = z.copy()
    rz = r @ z
    it = 0
    rel = 1.0
    while it < max_iters:
        Ap = A @ p
        denom = p @ Ap
        if denom <= 0:
            break
        alpha = rz / denom
        x += alpha * p
        r -= alpha * Ap
        it += 1
        rel = np.linalg.norm(r) / norm_b
        if rel <= tol:
            break
        z = inv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return PcgResult(x, it, float(rel), rel <= tol)


def solve_displacements(graph, pose, corr, edges, l, config, info: dict | None = None) -> np.ndarray:
    """Update ``graph.t`` in place with the least-squares optimum for fixed R and l."""
    J, b = build_displacement_system(graph, pose, corr, edges, l, config)
    t0 = graph.t.ravel().copy()
    if J.shape[0] == 0:
        return graph.t
    A = (J.T @ J).tocsr()
    rhs = -(J.T @ (J @ t0 + b))
    diag = A.diagonal().reshape(-1, 3)
    free_nodes = np.any(diag > 0, axis=1)
    free = np.repeat(free_nodes, 3)
    sub = A[free][:, free]
    res = pcg(sub, rhs[free], config.pcg_tol, config.pcg_max_iters)
    if not res.converged:
        log.warning("PCG stopped after %d iterations, relative residual %.3e",
                    res.iterations, res.rel_residual)
    delta = np.zeros_like(t0)
    delta[free] = res.x
    # guard against round-off increases: keep the old field if the energy went up
    def quad(x):
        r = J @ x + b
        return r @ r
    if quad(t0 + delta) <= quad(t0):
        graph.t = (t0 + delta).reshape(-1, 3)
    if info is not None:
        info.update(pcg_iterations=res.iterations, pcg_residual=res.rel_residual,
                    excluded_nodes=np.flatnonzero(~free_nodes))
    return graph.t


# -- step 2: rotations -----------------------------------------------------------

def solve_rotations(graph: DeformGraph, edges: np.ndarray, l: np.ndarray,
                    min_weight: float = 1e-12) -> np.ndarray:
    """Per-node rotations for fixed t and l; returns ids of nodes left unchanged."""
    n = graph.n_nodes
    if len(edges) == 0:
        return np.arange(n)
    i, j = edges[:, 0], edges[:, 1]
    d = _rest_differences(graph, edges)
    t = graph.t
    e = d + t[i] - t[j]
    A = np.zeros((n, 3, 3))
    np.add.at(A, i, l[:, None, None] * d[:, :, None] * e[:, None, :])
    usable = (l > min_weight) & (np.linalg.norm(d, axis=1) > 0)
    count = np.bincount(i[usable], minlength=n)
    ok = count >= 2
    U, _, Vt = np.linalg.svd(A[ok])
    V = np.transpose(Vt, (0, 2, 1))
    Ut = np.transpose(U, (0, 2, 1))
    D = np.ones((ok.sum(), 3))
    D[:, 2] = np.sign(np.linalg.det(V @ Ut))
    D[D[:, 2] == 0, 2] = 1.0
    R_new = V @ (D[:, :, None] * Ut)
    R = graph.R.copy()
    idx = np.flatnonzero(ok)
    # keep the previous rotation where the new one is not better (round-off)
    def node_cost(Rs, nodes):
        mask = np.isin(i, nodes)
        res = np.einsum("eab,eb->ea", Rs[i[mask]], d[mask]) - e[mask]
        return np.bincount(i[mask], weights=l[mask] * np.sum(res**2, axis=1), minlength=n)[nodes]
    trial = R.copy()
    trial[idx] = R_new
    better = node_cost(trial, idx) <= node_cost(R, idx)
    R[idx[better]] = R_new[better]
    graph.R = R
    return np.flatnonzero(~ok)


# -- step 3: line process --------------------------------------------------------

def line_process_weight(residual_sq: np.ndarray, mu: float) -> np.ndarray:
    return (mu / (mu + np.asarray(residual_sq, dtype=float))) ** 2


def solve_line_process(graph: DeformGraph, edges: np.ndarray, config: SolverConfig) -> np.ndarray:
    if len(edges) == 0:
        return np.zeros(0)
    res = regularizer_residuals(graph, edges)
    return line_process_weight(np.sum(res**2, axis=1), config.mu_for(graph))


# -- alternation -------------------------------------------------------------------

Correspond = Callable[[DeformGraph, GlobalPose], CorrespondenceSet]


def nonrigid_solve(graph: DeformGraph, mesh: CanonicalMesh, frame: DepthFrame | None,
                   pose: GlobalPose, config: SolverConfig, sparse=None,
                   correspond: Correspond | None = None, sweeps: int | None = None,
                   reset_rotations: bool = True) -> DeformationState:
    """Alternating optimization of t, R and l; updates ``graph.t`` and ``graph.R``.

    ``sparse`` is an optional ``(points, cells, targets)`` triple of matched
    canonical/live pairs.  ``correspond`` overrides projective association.
    """
    edges = graph.edges()
    l = np.ones(len(edges))
    if reset_rotations:
        graph.R = np.broadcast_to(np.eye(3), (graph.n_nodes, 3, 3)).copy()
    if correspond is None:
        if frame is None:
            raise ValueError("either a frame or a correspondence function is required")
        correspond = lambda g, p: mesh_correspondences(mesh, g, p, frame, config)  # noqa: E731
    telemetry = []
    flagged = np.zeros(0, np.int64)
    corr = None
    prev_energy = None
    for sweep in range(config.max_outer_sweeps if sweeps is None else sweeps):
        corr = correspond(graph, pose)
        if sparse is not None:
            corr = corr.with_sparse(*sparse)
        e0 = energy_total(graph, pose, corr, edges, l, config)[0]
        info: dict = {}
        solve_displacements(graph, pose, corr, edges, l, config, info)
        e1 = energy_total(graph, pose, corr, edges, l, config)[0]
        flagged = solve_rotations(graph, edges, l)
        e2 = energy_total(graph, pose, corr, edges, l, config)[0]
        l = solve_line_process(graph, edges, config)
        e3 = energy_total(graph, pose, corr, edges, l, config)
        telemetry.append(dict(sweep=sweep, n_dense=corr.n_dense, energies=(e0, e1, e2, e3[0]),
                              terms=e3[1:], pcg_iterations=info.get("pcg_iterations", 0),
                              pcg_residual=info.get("pcg_residual", 0.0)))
        log.debug("sweep %d: E %.6e -> %.6e -> %.6e -> %.6e (pcg %d)", sweep, e0, e1, e2, e3[0],
                  info.get("pcg_iterations", 0))
        if prev_energy is not None and abs(prev_energy - e3[0]) <= config.energy_rel_tol * max(prev_energy, 1e-300):
            break
        prev_energy = e3[0]
    return DeformationState(pose, edges, np.clip(l, 0.0, 1.0), telemetry, flagged, corr)


def format_telemetry(telemetry: list) -> str:
    """One line per sweep of a ``DeformationState.telemetry`` list."""
    lines = []
    for rec in telemetry:
        e = " ".join(f"{v:.9e}" for v in rec["energies"])
        lines.append(f"sweep {rec['sweep']} dense {rec['n_dense']} pcg {rec['pcg_iterations']} "
                     f"res {rec['pcg_residual']:.3e} energies {e}")
    return "\n".join(lines)
