import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from topofusion.grid_core import GridDims
from topofusion.tsdf_volume import (VIRTUAL_BOOTSTRAP_WEIGHT, W_MAX, DepthFrame, TsdfVolume, activate_newly_observed,
                                    assign_virtual_tsdf, fuse_depth, propagate_connectivity, read_snapshot,
                                    voxel_ownership)
from topofusion.warp_field import CUBE_EDGES, DeformGraph, GlobalPose, duplicate_cells, expand_graph, \
    restore_connectivity


def plane_setup(z0=0.5, k=1):
    voxel = 0.004
    s = (2 * k + 1) * voxel
    # a voxel plane lands exactly on z0
    dims = GridDims(6, 6, 6, origin=(-2.5 * s, -2.5 * s, z0 - 6 * voxel), spacing=s)
    g = DeformGraph(dims)
    expand_graph(g, list(itertools.product(range(5), range(5), range(5))))
    vol = TsdfVolume(dims, k)
    vol.ensure_capacity(g.n_nodes)
    frame = DepthFrame(np.full((60, 80), z0), 100.0, 100.0, 39.5, 29.5)
    return g, vol, frame


def cut_graph(k=1):
    # two cells along x; the right one is split by its four x-edges
    g = DeformGraph(GridDims(4, 3, 3, spacing=(2 * k + 1) * 0.004))
    expand_graph(g, [(0, 0, 0), (1, 0, 0)])
    vol = TsdfVolume(g.dims, k)
    vol.ensure_capacity(g.n_nodes)
    right = g.cells_at((1, 0, 0))[0]
    nodes = g.cell_nodes[right]
    cuts = {tuple(sorted((int(nodes[a]), int(nodes[b])))) for a, b in CUBE_EDGES if b - a == 1}
    return g, vol, right, cuts


@pytest.mark.parametrize("k", [1, 2, 3])
def test_structural_ratios(k):
    g = DeformGraph(GridDims(4, 4, 4, spacing=0.01))
    expand_graph(g, [(0, 0, 0), (1, 0, 0), (1, 1, 1)])
    vol = TsdfVolume(g.dims, k)
    for cid in g.active_cells:
        s = vol.cell_structure(g, int(cid))
        assert s["tsdf_cells"] == (2 * k + 1) ** 3
        assert s["voxels"] == (2 * k + 2) ** 3
        assert s["voxels_per_node"] == [(k + 1) ** 3] * 8


def test_voxel_ownership_examples():
    assert voxel_ownership((0, 0, 0), 1) == (0, 0, 0)
    assert voxel_ownership((3, 6, 9), 1) == (1, 2, 3)  # EDG corners
    # k=1: the 4 voxels along a cell edge split 2/2 between its nodes
    assert [voxel_ownership((i, 0, 0), 1)[0] for i in range(4)] == [0, 0, 1, 1]


@given(st.integers(1, 3), st.tuples(*[st.integers(0, 40)] * 3))
def test_voxel_ownership_is_nearest_node(k, v):
    b = 2 * k + 1
    owner = np.array(voxel_ownership(v, k))
    # owner node lies within k voxels per axis (block of (k+1) voxels per side of the node)
    assert np.all(np.abs(np.array(v) - owner * b) <= k + 1)
    assert np.all(np.array(v) - owner * b >= -k)


@pytest.mark.parametrize("k", [1, 2])
def test_propagate_duplicates_all_embedded_cells(k):
    g, vol, right, cuts = cut_graph(k)
    record = duplicate_cells(g, [right], cuts)
    restore_connectivity(g, record)
    dup = propagate_connectivity(vol, record, g)
    assert dup.tsdf_cell_copies[right] == 2 * (2 * k + 1) ** 3
    labels = dup.voxel_labels[right]
    n = 2 * k + 2
    # voxels follow their owning node: left half vs right half of the cell
    assert np.all(labels[: k + 1] == labels[0, 0, 0])
    assert np.all(labels[k + 1:] != labels[0, 0, 0])
    # the only cutting TSDF edges are x-edges across the middle
    edges = dup.cutting_edges[right]
    assert len(edges) == n * n
    assert all(a[0] == k and b[0] == k + 1 for a, b in edges)


def test_propagate_single_component_untouched():
    g, vol, right, _ = cut_graph()
    record = duplicate_cells(g, [right], [])
    restore_connectivity(g, record)
    dup = propagate_connectivity(vol, record, g)
    assert dup.tsdf_cell_copies == {}


def test_real_voxels_of_each_duplicate_share_one_label():
    g, vol, right, cuts = cut_graph()
    record = duplicate_cells(g, [right], cuts)
    restore_connectivity(g, record)
    propagate_connectivity(vol, record, g)
    for d in record.dups_of(right):
        nodes, _ = vol.cell_voxel_ids(g, [d.cell_id])
        corners = vol.cell_voxel_corner
        real = g.is_real[nodes[0]]
        assert np.all(d.corner_labels[corners][real] == d.label)


def test_assign_virtual_tsdf_rules():
    g, vol, right, cuts = cut_graph()
    vol.tsdf[:] = 0.3
    vol.weight[:] = 5.0
    nodes, blocks = vol.cell_voxel_ids(g, [right])
    # one negative real voxel right next to the cut, on the left side
    nid, bid = int(nodes[0][1, 1, 1]), int(blocks[0][1, 1, 1])
    vol.tsdf[nid, bid] = -0.4
    real_before = (vol.tsdf[: g.n_nodes].copy(), vol.weight[: g.n_nodes].copy())
    record = duplicate_cells(g, [right], cuts)
    restore_connectivity(g, record)
    propagate_connectivity(vol, record, g)
    assign_virtual_tsdf(vol, record, g)
    # real voxels untouched
    n0 = len(real_before[0])
    assert np.array_equal(vol.tsdf[:n0], real_before[0])
    assert np.array_equal(vol.weight[:n0], real_before[1])
    lfb = [d for d in record.dups_of(right) if d.cell_id == right][0]
    other = [d for d in record.dups_of(right) if d.cell_id != right][0]
    # in the duplicate keeping the left half, the virtual voxel across the cut
    # from the negative real voxel gets the negated value
    vn, vb = vol.cell_voxel_ids(g, [lfb.cell_id])
    assert vol.tsdf[vn[0][2, 1, 1], vb[0][2, 1, 1]] == pytest.approx(0.4)
    assert vol.weight[vn[0][2, 1, 1], vb[0][2, 1, 1]] == VIRTUAL_BOOTSTRAP_WEIGHT
    # isolated virtual voxel
    assert vol.tsdf[vn[0][3, 3, 3], vb[0][3, 3, 3]] == 1.0
    # in the other duplicate the real neighbours are positive: rule 2 does not apply
    vn, vb = vol.cell_voxel_ids(g, [other.cell_id])
    assert vol.tsdf[vn[0][2, 1, 1], vb[0][2, 1, 1]] == pytest.approx(0.3)  # real voxel
    virtual = ~g.is_real[vn[0]]
    assert np.all(vol.tsdf[vn[0][virtual], vb[0][virtual]] == 1.0)


def test_fusion_zero_on_surface_and_idempotent():
    g, vol, frame = plane_setup()
    fuse_depth(vol, frame, g, GlobalPose.identity())
    nodes, blocks = vol.active_voxels(g)
    pos = vol.voxel_positions(g, nodes, blocks)
    on = np.abs(pos[:, 2] - 0.5) < 1e-12
    centre = on & (np.abs(pos[:, 0]) < 0.01) & (np.abs(pos[:, 1]) < 0.01)
    assert centre.any()
    assert np.all(np.abs(vol.tsdf[nodes[centre], blocks[centre]]) < 1e-9)
    first = vol.tsdf.copy()
    fuse_depth(vol, frame, g, GlobalPose.identity())
    assert np.allclose(vol.tsdf, first, atol=1e-12)


def test_fusion_bounds_and_guard():
    g, vol, frame = plane_setup()
    for _ in range(3):
        fuse_depth(vol, frame, g, GlobalPose.identity(), w_new=30.0)
    assert np.all(np.abs(vol.tsdf) <= 1)
    assert np.all(vol.weight <= W_MAX)
    nodes, blocks = vol.active_voxels(g)
    pos = vol.voxel_positions(g, nodes, blocks)
    # far behind the surface nothing is fused
    deep = pos[:, 2] > 0.5 + vol.truncation * 1.01
    assert np.all(vol.weight[nodes[deep], blocks[deep]] == 0)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.49, 0.51), st.floats(0.49, 0.51))
def test_fusion_order_insensitive(za, zb):
    g, vol_ab, frame = plane_setup()
    a = DepthFrame(np.full((60, 80), za), 100.0, 100.0, 39.5, 29.5)
    b = DepthFrame(np.full((60, 80), zb), 100.0, 100.0, 39.5, 29.5)
    vol_ba = TsdfVolume(g.dims, 1)
    vol_ba.ensure_capacity(g.n_nodes)
    fuse_depth(vol_ab, a, g, GlobalPose.identity())
    fuse_depth(vol_ab, b, g, GlobalPose.identity())
    fuse_depth(vol_ba, b, g, GlobalPose.identity())
    fuse_depth(vol_ba, a, g, GlobalPose.identity())
    assert np.allclose(vol_ab.tsdf, vol_ba.tsdf, atol=1e-12, rtol=0)
    assert np.allclose(vol_ab.weight, vol_ba.weight, atol=1e-12, rtol=0)


def test_activation_empty_when_nothing_new():
    g, vol, frame = plane_setup()
    assert activate_newly_observed(vol, frame, g, GlobalPose.identity()) == []
    empty = DepthFrame(np.zeros((60, 80)), 100.0, 100.0, 39.5, 29.5)
    cells, disp = activate_newly_observed(vol, empty, g, GlobalPose.identity(), with_displacement=True)
    assert cells == [] and disp.shape == (0, 3)


def test_activation_shell_contains_surface():
    dims = GridDims(10, 10, 10, origin=(-0.06, -0.06, 0.44), spacing=0.012)
    g = DeformGraph(dims)
    vol = TsdfVolume(dims, 1)
    frame = DepthFrame(np.full((60, 80), 0.5), 100.0, 100.0, 39.5, 29.5)
    cells = activate_newly_observed(vol, frame, g, GlobalPose.identity())
    assert cells
    z = np.array([dims.origin[2] + c[2] * dims.spacing for c in cells])
    # every activated cell lies within one cell plus the band of the plane
    assert np.all(z <= 0.5 + vol.truncation)
    assert np.all(z + dims.spacing >= 0.5 - vol.truncation)
    expand_graph(g, cells)
    assert activate_newly_observed(vol, frame, g, GlobalPose.identity()) == []


def test_snapshot_round_trip(tmp_path):
    g, vol, frame = plane_setup()
    fuse_depth(vol, frame, g, GlobalPose.identity())
    n = vol.export_snapshot(g, tmp_path / "vol.bin")
    size, rec = read_snapshot(tmp_path / "vol.bin")
    assert len(rec) == n == len(vol.active_voxels(g)[0])
    assert size == pytest.approx(vol.voxel_size)
    assert np.all(np.abs(rec["tsdf"]) <= 1)


def test_depth_frame_rejects_negative():
    with pytest.raises(ValueError):
        DepthFrame(np.full((4, 4), -1.0), 1, 1, 0, 0)
