"""Frame loop: register, detect topology changes, fuse, extend, extract."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy.spatial import cKDTree

from ..grid_core import GridDims
from ..meshing import (CanonicalMesh, StaleReferenceError, marching_cubes, mesh_connected_components,
                       remove_small_components, vertex_normals, warp_mesh, write_obj, write_ply)
from ..registration import format_telemetry, nonrigid_solve, rigid_icp
from ..topology import (CuttingEdgeReport, apply_topology_update, backward_register, detect_cutting_edges,
                        real_edges, restrict_report)
from ..tsdf_volume import DepthFrame, TsdfVolume, activate_newly_observed, fuse_depth
from ..warp_field import REUSE_TOLERANCE, DeformGraph, GlobalPose, expand_graph, warp_points
from .config import PipelineConfig
from .metrics import evaluate, format_csv
from .scenes import SceneSpec, scene_bounds, synth_scene

log = logging.getLogger(__name__)


class ReconstructionError(RuntimeError):
    pass


@dataclass
class FrameRecord:
    index: int
    pose: GlobalPose
    t: np.ndarray
    R: np.ndarray
    report: CuttingEdgeReport | None
    graph_version: int
    n_nodes: int
    # old node -> new node ids created by this frame's topology update
    remap: dict = field(default_factory=dict)


@dataclass
class FrameInput:
    frame: DepthFrame
    gt: tuple | None = None  # (vertices, triangles) in the live camera frame
    sparse: tuple | None = None  # (canonical points, live points)


@dataclass
class Reconstruction:
    graph: DeformGraph
    volume: TsdfVolume
    mesh: CanonicalMesh
    records: list
    metrics: list
    reports: list
    telemetry: list  # (frame, "forward" | "backward", per-sweep records)
    updates: int = 0
    canonical_meshes: list = field(default_factory=list)


def check_structure(graph: DeformGraph, volume: TsdfVolume) -> None:
    """Per-cell voxel ratios of the non-manifold grids (debug pass)."""
    n = volume.ratio
    for cid in graph.active_cells:
        s = volume.cell_structure(graph, int(cid))
        if s["tsdf_cells"] != n**3 or s["voxels"] != (n + 1) ** 3:
            raise ReconstructionError(f"cell {cid} breaks the voxel ratio invariant")
        if any(c != (volume.k + 1) ** 3 for c in s["voxels_per_node"]):
            raise ReconstructionError(f"cell {cid}: a node controls the wrong number of voxels")


def lattice_for_bounds(lo, hi, config: PipelineConfig, center=None) -> GridDims:
    """EDG lattice covering ``[lo, hi]`` plus a margin, with ``center`` mid-cell."""
    s = config.edg_spacing
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    center = (lo + hi) / 2 if center is None else np.asarray(center, float)
    reach = np.maximum(center - lo, hi - center)
    m = np.ceil(reach / s).astype(int) + config.margin_cells
    origin = center - (m + 0.5) * s
    nodes = 2 * m + 2
    ratio = 2 * config.k + 1
    limit = (config.max_voxels_per_axis - 1) // ratio + 1
    if np.any(nodes > limit):
        raise ReconstructionError(f"volume of {nodes.tolist()} EDG nodes exceeds {config.max_voxels_per_axis} voxels per axis")
    return GridDims(int(nodes[0]), int(nodes[1]), int(nodes[2]), origin=tuple(origin.tolist()), spacing=s)


def configured_lattice(config: PipelineConfig) -> GridDims | None:
    if config.volume_origin is None or config.volume_nodes is None:
        return None
    n = config.volume_nodes
    return GridDims(int(n[0]), int(n[1]), int(n[2]), origin=tuple(config.volume_origin), spacing=config.edg_spacing)


def scene_source(config: PipelineConfig) -> tuple[Iterator[FrameInput], GridDims, int]:
    spec = SceneSpec(**config.scene)
    n = spec.n_frames if config.frames is None else min(config.frames, spec.n_frames)
    dims = configured_lattice(config)
    if dims is None:
        lo, hi = scene_bounds(spec)
        dims = lattice_for_bounds(lo, hi, config, center=np.array([0.0, 0.0, 0.35]))

    def gen():
        for f in range(n):
            sf = synth_scene(spec, f)
            yield FrameInput(sf.frame, (sf.gt_vertices, sf.gt_triangles), (sf.sparse_canonical, sf.sparse_live))
    return gen(), dims, n


def attach_sparse(pairs, mesh: CanonicalMesh, max_dist: float):
    """Give each canonical sparse point the EDG cell of its nearest mesh vertex."""
    if pairs is None or mesh.n_vertices == 0 or len(pairs[0]) == 0:
        return None
    canon, live = pairs
    dist, idx = cKDTree(mesh.vertices).query(canon)
    ok = dist <= max_dist
    if not np.any(ok):
        return None
    return canon[ok], mesh.edg_cell[idx[ok]], live[ok]


def run_reconstruction(config: PipelineConfig, frames: Iterator[FrameInput], dims: GridDims | None = None,
                       on_frame: Callable | None = None, keep_meshes: bool = False,
                       sparse_fn: Callable = None) -> Reconstruction:
    """Run the full loop; ``sparse_fn(index, graph, mesh)`` may return sparse pairs."""
    solver = config.solver
    graph = volume = None
    mesh = CanonicalMesh.empty()
    pose = GlobalPose.identity()
    records, metrics, reports, telemetry, canon = [], [], [], [], []
    updates = 0
    for i, item in enumerate(frames):
        frame = item.frame
        tic = time.perf_counter()
        report = None
        remap = {}
        if i == 0:
            if dims is None:
                pts = frame.backproject()[frame.valid]
                if len(pts) == 0:
                    raise ReconstructionError("frame 0 has no valid depth")
                dims = lattice_for_bounds(pts.min(0), pts.max(0), config)
            graph = DeformGraph(dims)
            volume = TsdfVolume(dims, config.k)
            if config.use_known_pose and frame.camera_pose is not None:
                pose = frame.camera_pose.copy()
        else:
            if config.use_known_pose and frame.camera_pose is not None:
                pose = frame.camera_pose.copy()
            elif mesh.n_vertices:
                pose = rigid_icp(mesh, graph, pose, frame, solver)
            if config.nonrigid and mesh.n_vertices:
                if sparse_fn is not None:
                    sparse = sparse_fn(i, graph, mesh)
                elif config.use_sparse:
                    sparse = attach_sparse(item.sparse, mesh, 2 * volume.voxel_size)
                else:
                    sparse = None
                fwd = nonrigid_solve(graph, mesh, frame, pose, solver, sparse=sparse)
                telemetry.append((i, "forward", fwd.telemetry))
                if config.topology and len(fwd.edges):
                    bwd = backward_register(graph, fwd, mesh, frame, solver,
                                            sweeps=config.backward_sweeps, sparse=sparse)
                    telemetry.append((i, "backward", bwd.telemetry))
                    report = detect_cutting_edges(fwd.edge_weights(), bwd.edge_weights(), i)
                    report = restrict_report(report, real_edges(graph, fwd.edges))
                    reports.append(report)
                    if len(report):
                        upd = apply_topology_update(graph, volume, report)
                        if upd.changed:
                            updates += 1
                            for pc in upd.record.copies:
                                nid = upd.record.copy_to_node[pc.copy_id]
                                if nid in upd.record.new_nodes:
                                    remap.setdefault(pc.source_node, set()).add(nid)
                            log.info("frame %d: %d cutting edges, %d cells duplicated", i, len(report),
                                     len(upd.record.duplicated_sources))
        if i > 0:
            fuse_depth(volume, frame, graph, pose)
        anchors = None
        if i > 0 and mesh.n_vertices:
            try:
                live = warp_mesh(mesh, graph, pose)
                anchors = (mesh.vertices, live.vertices, vertex_normals(live.vertices, live.triangles))
            except StaleReferenceError:
                anchors = None
        new_cells, disp = activate_newly_observed(volume, frame, graph, pose, anchors=anchors,
                                                  with_displacement=True)
        if new_cells:
            # without topology updates the graph stays manifold: one copy per lattice point
            tol = REUSE_TOLERANCE if config.topology else np.inf
            expand_graph(graph, new_cells, extrapolate=True, displacements=disp, reuse_tolerance=tol)
            volume.ensure_capacity(graph.n_nodes)
        if i == 0:
            fuse_depth(volume, frame, graph, pose)
        mesh = remove_small_components(marching_cubes(volume, graph), config.min_component_fraction)
        if keep_meshes:
            canon.append(mesh)
        records.append(FrameRecord(i, pose.copy(), graph.t.copy(), graph.R.copy(), report, graph.version,
                                   graph.n_nodes, {k: sorted(v) for k, v in remap.items()}))
        n_cut = len(report) if report is not None else 0
        if item.gt is not None and mesh.n_vertices:
            live = warp_mesh(mesh, graph, pose)
            metrics.append(evaluate(live.vertices, item.gt[0], item.gt[1], volume.voxel_size, i,
                                    config.off_surface_cells, n_cut))
        log.info("frame %d: %d cells, %d nodes, %d vertices, %.2fs", i, len(graph.active_cells),
                 graph.n_nodes, mesh.n_vertices, time.perf_counter() - tic)
        if on_frame is not None:
            on_frame(i, graph, volume, mesh)
    if graph is None:
        raise ReconstructionError("no frames")
    return Reconstruction(graph, volume, mesh, records, metrics, reports, telemetry, updates, canon)


def playback_displacements(graph: DeformGraph, record: FrameRecord) -> np.ndarray:
    """Displacements of every current node as they were at ``record``'s frame."""
    t = np.zeros((graph.n_nodes, 3))
    for n in range(graph.n_nodes):
        m = n
        seen = set()
        while m >= record.n_nodes:
            if m in seen:
                raise StaleReferenceError(f"frame {record.index}: cyclic provenance at node {n}")
            seen.add(m)
            m = graph.provenance(m)
            if m < 0:
                raise StaleReferenceError(f"frame {record.index}: node {n} has no ancestor")
        t[n] = record.t[m]
    return t


def export_playback(mesh: CanonicalMesh, graph: DeformGraph, records: list, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        t = playback_displacements(graph, rec)
        verts = warp_points(mesh.vertices, mesh.edg_cell, graph, rec.pose, t=t) if mesh.n_vertices else mesh.vertices
        _, labels = mesh_connected_components(mesh)
        p = out / f"frame_{rec.index:04d}.ply"
        write_ply(p, verts, mesh.triangles, labels)
        paths.append(p)
    return paths


def write_outputs(result: Reconstruction, out_dir, config: PipelineConfig, verbose: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = result.mesh
    _, labels = mesh_connected_components(mesh)
    write_obj(out / "canonical.obj", mesh.vertices, mesh.triangles)
    write_ply(out / "canonical.ply", mesh.vertices, mesh.triangles, labels)
    if mesh.n_vertices:
        live = warp_mesh(mesh, result.graph, result.records[-1].pose)
        write_obj(out / "live.obj", live.vertices, live.triangles)
        write_ply(out / "live.ply", live.vertices, live.triangles, labels)
    if result.metrics:
        (out / "metrics.csv").write_text(format_csv(result.metrics))
    lines = [r.format() for r in result.reports]
    (out / "topology.log").write_text("\n".join(lines) + ("\n" if lines else ""))
    if verbose:
        text = [f"frame {i} {kind}\n{format_telemetry(recs)}" for i, kind, recs in result.telemetry]
        (out / "telemetry.log").write_text("\n".join(text) + "\n")
