"""Topology change detection and the EDG/TSDF connectivity update."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .grid_core import CapacityError, unravel_index
from .meshing import CanonicalMesh, vertex_normals
from .registration import CorrespondenceSet, DeformationState, SolverConfig, nonrigid_solve
from .tsdf_volume import DepthFrame, TsdfDuplication, TsdfVolume, assign_virtual_tsdf, propagate_connectivity
from .warp_field import CUBE_EDGES, DeformGraph, DuplicationRecord, duplicate_cells, restore_connectivity, warp_points

log = logging.getLogger(__name__)

FORWARD_THRESHOLD = 0.5
BACKWARD_THRESHOLD = 0.8


@dataclass
class CuttingEdgeReport:
    edges: set
    forward_l: dict
    backward_l: dict
    frame_index: int = -1

    def __post_init__(self):
        for e in self.edges:
            if not (self.forward_l[e] < FORWARD_THRESHOLD and self.backward_l[e] < BACKWARD_THRESHOLD):
                raise ValueError(f"edge {e} does not pass both thresholds")

    def __len__(self) -> int:
        return len(self.edges)

    def format(self) -> str:
        lines = [f"frame {self.frame_index} cutting_edges {len(self.edges)}"]
        for a, b in sorted(self.edges):
            lines.append(f"edge {a} {b} forward {self.forward_l[(a, b)]:.9f} backward {self.backward_l[(a, b)]:.9f}")
        return "\n".join(lines)


def detect_cutting_edges(forward_l: dict, backward_l: dict, frame_index: int = -1,
                         forward_threshold: float = FORWARD_THRESHOLD,
                         backward_threshold: float = BACKWARD_THRESHOLD) -> CuttingEdgeReport:
    """An edge is cutting iff forward l < 0.5 and backward l < 0.8."""
    if set(forward_l) != set(backward_l):
        raise ValueError("forward and backward weights cover different edge sets")
    cut = {e for e in forward_l if forward_l[e] < forward_threshold and backward_l[e] < backward_threshold}
    return CuttingEdgeReport(cut, dict(forward_l), dict(backward_l), frame_index)


def real_edges(graph: DeformGraph, edges) -> set:
    """The subset of ``edges`` whose endpoints are both real nodes.

    Virtual nodes only pad duplicated cells and carry no observed surface of
    their own, so a low weight on an edge touching one says nothing about
    material being torn.
    """
    real = graph.is_real
    return {(int(a), int(b)) for a, b in edges if real[a] and real[b]}


def restrict_report(report: CuttingEdgeReport, eligible: set) -> CuttingEdgeReport:
    """Keep only the cutting edges found in ``eligible``."""
    return CuttingEdgeReport(report.edges & eligible, report.forward_l, report.backward_l,
                             report.frame_index)


def reverse_correspondences(mesh: CanonicalMesh, graph: DeformGraph, state_pose, frame: DepthFrame,
                            config: SolverConfig, stride: int = 2) -> CorrespondenceSet:
    """Frame points matched to their nearest warped mesh vertex.

    Roles are swapped with respect to projective association: every sampled
    depth pixel looks for a mesh vertex, and the pair is kept only when the
    vertex also projects within ``stride`` pixels of it (mutual check) and the
    normals agree.
    """
    live = warp_points(mesh.vertices, mesh.edg_cell, graph, state_pose)
    live_n = vertex_normals(live, mesh.triangles)
    valid = frame.valid.copy()
    mask = np.zeros_like(valid)
    mask[::stride, ::stride] = True
    vs, us = np.nonzero(valid & mask)
    pts = frame.backproject()[vs, us]
    nrm = frame.normals()[vs, us]
    ok = np.linalg.norm(nrm, axis=1) > 0.5
    vs, us, pts, nrm = vs[ok], us[ok], pts[ok], nrm[ok]
    if len(pts) == 0 or len(live) == 0:
        return CorrespondenceSet(np.zeros((0, 3)), np.zeros(0, np.int64), np.zeros((0, 3)),
                                 np.zeros((0, 3)), np.zeros(0, np.int64))
    dist, vid = cKDTree(live).query(pts)
    u, v, inside = frame.project(live[vid])
    keep = (dist <= config.corr_dist_max) & inside
    keep &= (np.abs(u - us) <= stride) & (np.abs(v - vs) <= stride)
    has_n = np.linalg.norm(live_n[vid], axis=1) > 0.5
    keep &= ~has_n | (np.sum(live_n[vid] * nrm, axis=1) >= np.cos(config.corr_normal_max_angle))
    vid, pts, nrm = vid[keep], pts[keep], nrm[keep]
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return CorrespondenceSet(mesh.vertices[vid], mesh.edg_cell[vid], pts, nrm, vid)


def supported_sparse(sparse, frame: DepthFrame, pose, spacing: float, config: SolverConfig,
                     radius_cells: float = 3.0, motion_tol_cells: float = 1.0):
    """Sparse pairs that survive a bidirectional consistency check.

    A pair ``(canonical point, live target)`` is kept when
    (a) the target projects onto a valid pixel whose back-projection lies
    within the correspondence distance of it, so the image confirms it, and
    (b) some other pair within ``radius_cells`` EDG cells in canonical space
    implies the same motion to within ``motion_tol_cells`` cells, so the
    match is not an isolated mismatch.
    Returns ``None`` when nothing survives.
    """
    if sparse is None or len(sparse[0]) == 0:
        return None
    points, cells, targets = (np.asarray(a) for a in sparse)
    u, v, inside = frame.project(targets)
    keep = inside.copy()
    idx = np.flatnonzero(inside)
    xyz = frame.backproject()[v[idx], u[idx]]
    keep[idx] = frame.valid[v[idx], u[idx]] & (np.linalg.norm(xyz - targets[idx], axis=1) <= config.corr_dist_max)
    motion = targets - pose.apply(points)
    near = cKDTree(points).query_ball_point(points, radius_cells * spacing)
    tol = motion_tol_cells * spacing
    for i in np.flatnonzero(keep):
        others = [j for j in near[i] if j != i]
        keep[i] = bool(others) and np.min(np.linalg.norm(motion[others] - motion[i], axis=1)) <= tol
    if not np.any(keep):
        return None
    return points[keep], cells[keep], targets[keep]


def backward_register(graph: DeformGraph, forward: DeformationState, mesh: CanonicalMesh,
                      frame: DepthFrame, config: SolverConfig, sweeps: int = 2,
                      sparse=None) -> DeformationState:
    """Re-register the forward-registered mesh against the same frame.

    Runs on a copy of ``graph`` seeded with the forward displacements, with
    fresh rotations and line process weights and reverse (frame to mesh)
    association, so weights that were pulled down by one-sided outliers
    recover. Sparse matches are reused only when they pass
    ``supported_sparse``.
    """
    work = graph.copy()
    sparse = supported_sparse(sparse, frame, forward.pose, graph.spacing, config)
    corr = lambda g, p: reverse_correspondences(mesh, g, p, frame, config)  # noqa: E731
    state = nonrigid_solve(work, mesh, frame, forward.pose, config, sparse=sparse,
                           correspond=corr, sweeps=sweeps, reset_rotations=True)
    if not np.array_equal(state.edges, forward.edges):
        raise ValueError("backward registration changed the edge set")
    return state


def candidate_cells(graph: DeformGraph, edges) -> list[int]:
    """Active cells that contain at least one of ``edges`` as a lattice edge."""
    if not edges:
        return []
    cells = graph.active_cells
    nodes = graph.cell_nodes[cells]
    keys = set(edges)
    out = []
    for row, cid in zip(nodes, cells):
        for a, b in CUBE_EDGES:
            x, y = int(row[a]), int(row[b])
            if (min(x, y), max(x, y)) in keys:
                out.append(int(cid))
                break
    return out


@dataclass
class TopologyUpdate:
    record: DuplicationRecord | None = None
    tsdf: TsdfDuplication | None = None
    candidates: list = field(default_factory=list)
    deferred: list = field(default_factory=list)  # cells skipped because a bucket was full

    @property
    def changed(self) -> bool:
        return self.record is not None and bool(self.record.duplicated_sources)


def apply_topology_update(graph: DeformGraph, volume: TsdfVolume, report: CuttingEdgeReport) -> TopologyUpdate:
    """Duplicate the cells crossed by cutting edges in both grids."""
    cands = candidate_cells(graph, report.edges)
    if not cands:
        return TopologyUpdate()
    deferred = []
    while True:
        record = duplicate_cells(graph, cands, report.edges)
        if not record.duplicated_sources:
            return TopologyUpdate(None, None, cands, deferred)
        try:
            restore_connectivity(graph, record)
            break
        except CapacityError as err:
            # the bucket is full: leave every cell around that lattice point uncut this frame
            if err.index1d < 0:
                raise
            touching = _cells_touching(graph, cands, err.index1d)
            log.warning("grid point %d at capacity, deferring %d cells", err.index1d, len(touching))
            deferred.extend(touching)
            cands = [c for c in cands if c not in set(touching)]
            if not cands:
                return TopologyUpdate(None, None, [], deferred)
    tsdf = propagate_connectivity(volume, record, graph)
    assign_virtual_tsdf(volume, record, graph)
    return TopologyUpdate(record, tsdf, cands, deferred)


def _cells_touching(graph: DeformGraph, cells, index1d: int) -> list[int]:
    coord = np.array(unravel_index(index1d, graph.dims))
    out = []
    for cid in cells:
        corners = graph.coords[graph.cell_nodes[cid]]
        if np.any(np.all(corners == coord, axis=1)):
            out.append(int(cid))
    return out


def write_report_log(path, reports: list[CuttingEdgeReport]) -> None:
    Path(path).write_text("\n".join(r.format() for r in reports) + "\n")
