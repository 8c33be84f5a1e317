import itertools

import numpy as np
import pytest

from topofusion.grid_core import GridDims
from topofusion.topology import (BACKWARD_THRESHOLD, FORWARD_THRESHOLD, CuttingEdgeReport, apply_topology_update,
                                 candidate_cells, detect_cutting_edges, real_edges, restrict_report,
                                 write_report_log)
from topofusion.tsdf_volume import TsdfVolume
from topofusion.warp_field import CUBE_EDGES, DeformGraph, expand_graph


def test_thresholds():
    assert FORWARD_THRESHOLD == 0.5 and BACKWARD_THRESHOLD == 0.8
    fwd = {(0, 1): 0.1, (1, 2): 0.1, (2, 3): 0.9, (3, 4): 0.5, (4, 5): 0.49}
    bwd = {(0, 1): 0.7, (1, 2): 0.95, (2, 3): 0.1, (3, 4): 0.1, (4, 5): 0.8}
    # both tests are strict: 0.5 forward and 0.8 backward do not cut
    assert detect_cutting_edges(fwd, bwd).edges == {(0, 1)}


def test_backward_veto():
    fwd = {(0, 1): 0.01}
    assert len(detect_cutting_edges(fwd, {(0, 1): 0.99})) == 0
    assert len(detect_cutting_edges(fwd, {(0, 1): 0.01})) == 1


def test_report_validation_and_format(tmp_path):
    with pytest.raises(ValueError):
        CuttingEdgeReport({(0, 1)}, {(0, 1): 0.9}, {(0, 1): 0.1})
    with pytest.raises(ValueError):
        detect_cutting_edges({(0, 1): 0.1}, {(1, 2): 0.1})
    rep = detect_cutting_edges({(0, 1): 0.25, (1, 2): 0.9}, {(0, 1): 0.5, (1, 2): 0.9}, frame_index=3)
    text = rep.format()
    assert text.splitlines()[0] == "frame 3 cutting_edges 1"
    assert text.splitlines()[1].startswith("edge 0 1 forward 0.25")
    write_report_log(tmp_path / "t.log", [rep, rep])
    assert (tmp_path / "t.log").read_text().count("cutting_edges") == 2


def bar():
    g = DeformGraph(GridDims(5, 3, 3, spacing=0.012))
    expand_graph(g, [(x, 0, 0) for x in range(3)])
    vol = TsdfVolume(g.dims, 1)
    vol.ensure_capacity(g.n_nodes)
    return g, vol


def test_candidate_cells():
    g, _ = bar()
    assert candidate_cells(g, []) == []
    mid = g.cells_at((1, 0, 0))[0]
    n = g.cell_nodes[mid]
    # an x-edge interior to the middle cell only
    e = tuple(sorted((int(n[0]), int(n[1]))))
    assert candidate_cells(g, [e]) == [mid]
    # a face edge shared by the first two cells
    f = tuple(sorted((int(n[0]), int(n[2]))))
    assert sorted(candidate_cells(g, [f])) == sorted([g.cells_at((0, 0, 0))[0], mid])


def test_real_edges_and_restrict():
    g, _ = bar()
    edges = g.edges()
    assert len(real_edges(g, edges)) == len(edges)
    g.is_real[0] = False
    r = real_edges(g, edges)
    assert all(0 not in e for e in r)
    rep = CuttingEdgeReport({(0, 1), (1, 2)}, {(0, 1): 0, (1, 2): 0}, {(0, 1): 0, (1, 2): 0})
    assert restrict_report(rep, {(1, 2)}).edges == {(1, 2)}


def test_apply_update_splits_middle_cell():
    g, vol = bar()
    mid = g.cells_at((1, 0, 0))[0]
    n = g.cell_nodes[mid]
    cuts = {tuple(sorted((int(n[a]), int(n[b])))) for a, b in CUBE_EDGES if b - a == 1}
    rep = CuttingEdgeReport(cuts, dict.fromkeys(cuts, 0.0), dict.fromkeys(cuts, 0.0))
    n_before = g.n_nodes
    up = apply_topology_update(g, vol, rep)
    assert up.changed and up.deferred == []
    assert len(g.cells_at((1, 0, 0))) == 2
    assert g.n_nodes == n_before + 8
    assert up.tsdf.tsdf_cell_copies[mid] == 2 * 27


def test_apply_update_noop():
    g, vol = bar()
    rep = CuttingEdgeReport(set(), {}, {})
    n_nodes = g.n_nodes
    up = apply_topology_update(g, vol, rep)
    assert not up.changed
    assert g.n_nodes == n_nodes and len(g.active_cells) == 3


def test_capacity_defers_instead_of_failing():
    # a 2x2x2 block of cells all torn apart along every edge would need
    # more than eight copies at the centre lattice point
    g = DeformGraph(GridDims(4, 4, 4, spacing=0.012))
    expand_graph(g, list(itertools.product(range(2), repeat=3)))
    vol = TsdfVolume(g.dims, 1)
    vol.ensure_capacity(g.n_nodes)
    cuts = {tuple(sorted(map(int, e))) for e in g.edges()}
    rep = CuttingEdgeReport(cuts, dict.fromkeys(cuts, 0.0), dict.fromkeys(cuts, 0.0))
    up = apply_topology_update(g, vol, rep)
    assert g.affiliation_counts().max() <= 8
    assert up.changed or up.deferred


def test_supported_sparse_drops_isolated_and_unseen_matches():
    from topofusion.registration import SolverConfig
    from topofusion.topology import supported_sparse
    from topofusion.tsdf_volume import DepthFrame
    from topofusion.warp_field import GlobalPose
    frame = DepthFrame(np.full((60, 80), 0.5), 100.0, 100.0, 39.5, 29.5)
    s = 0.012
    # a patch of matches on the plane z = 0.5 moving coherently by 2 mm
    xs = np.linspace(-0.02, 0.02, 5)
    pts = np.array([[x, y, 0.5] for x in xs for y in xs])
    targets = pts + [0.002, 0, 0]
    cells = np.arange(len(pts))
    out = supported_sparse((pts, cells, targets), frame, GlobalPose.identity(), s, SolverConfig())
    assert len(out[0]) == len(pts)
    # one mismatched target three cells away: on the surface but incoherent
    bad = targets.copy()
    bad[12] += [3 * s, 0, 0]
    out = supported_sparse((pts, cells, bad), frame, GlobalPose.identity(), s, SolverConfig())
    assert 12 not in out[1].tolist() and len(out[1]) == len(pts) - 1
    # a target floating off the observed surface
    bad = targets.copy()
    bad[0] += [0, 0, -0.1]
    out = supported_sparse((pts, cells, bad), frame, GlobalPose.identity(), s, SolverConfig())
    assert 0 not in out[1].tolist()
    assert supported_sparse(None, frame, GlobalPose.identity(), s, SolverConfig()) is None
