import itertools

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from topofusion.grid_core import GridDims
from topofusion.meshing import (CanonicalMesh, StaleReferenceError, boundary_edge_count, marching_cubes,
                                mesh_connected_components, read_obj, read_ply, remove_small_components,
                                vertex_normals, warp_mesh, write_obj, write_ply)
from topofusion.tsdf_volume import TsdfVolume, assign_virtual_tsdf, propagate_connectivity
from topofusion.warp_field import DeformGraph, GlobalPose, duplicate_cells, expand_graph, restore_connectivity


def sdf_volume(sdf, n=6, spacing=0.012, k=1, origin=(-0.036, -0.036, -0.036)):
    g = DeformGraph(GridDims(n + 1, n + 1, n + 1, origin=origin, spacing=spacing))
    expand_graph(g, list(itertools.product(range(n), repeat=3)))
    vol = TsdfVolume(g.dims, k)
    vol.ensure_capacity(g.n_nodes)
    fill(vol, g, sdf)
    return g, vol


def fill(vol, g, sdf):
    nodes, blocks = vol.active_voxels(g)
    pos = vol.voxel_positions(g, nodes, blocks)
    vol.tsdf[nodes, blocks] = np.clip(sdf(pos) / vol.truncation, -1, 1)
    vol.weight[nodes, blocks] = 1.0


def sphere(r):
    return lambda p: np.linalg.norm(p, axis=1) - r


def test_sphere_is_closed_and_accurate():
    g, vol = sdf_volume(sphere(0.025))
    mesh = marching_cubes(vol, g)
    assert mesh.n_vertices > 100
    assert boundary_edge_count(mesh) == 0
    assert mesh_connected_components(mesh)[0] == 1
    err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.025)
    assert err.max() < 0.1 * vol.voxel_size
    # outward orientation
    n = vertex_normals(mesh.vertices, mesh.triangles)
    assert np.all(np.sum(n * mesh.vertices, axis=1) > 0)


def test_unobserved_volume_is_empty():
    g, vol = sdf_volume(sphere(0.025))
    vol.weight[:] = 0
    assert marching_cubes(vol, g).n_vertices == 0
    assert marching_cubes(vol, DeformGraph(g.dims)).n_vertices == 0


def test_vertices_carry_their_cell():
    g, vol = sdf_volume(sphere(0.025))
    mesh = marching_cubes(vol, g)
    lo = g.dims.position(g.cell_coords[mesh.edg_cell])
    assert np.all(mesh.vertices >= lo - 1e-12)
    assert np.all(mesh.vertices <= lo + g.spacing + 1e-12)


def test_extraction_is_deterministic():
    g, vol = sdf_volume(sphere(0.02))
    a, b = marching_cubes(vol, g), marching_cubes(vol, g)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)


def slab_split():
    g = DeformGraph(GridDims(6, 3, 3, origin=(0, -0.012, -0.012), spacing=0.012))
    cells = [(x, y, z) for x in range(5) for y in range(2) for z in range(2)]
    expand_graph(g, cells)
    vol = TsdfVolume(g.dims, 1)
    vol.ensure_capacity(g.n_nodes)
    # a long bar along x, centred in y and z
    fill(vol, g, lambda p: np.maximum(np.abs(p[:, 1]), np.abs(p[:, 2])) - 0.007)
    return g, vol


def test_duplicated_cells_disconnect_the_surface():
    g, vol = slab_split()
    before = marching_cubes(vol, g)
    assert mesh_connected_components(before)[0] == 1
    # cut every x-edge between lattice planes x=2 and x=3
    edges = g.edges()
    x = g.coords[:, 0]
    cuts = {tuple(sorted(map(int, e))) for e in edges if {x[e[0]], x[e[1]]} == {2, 3}}
    srcs = [int(c) for c in g.active_cells if g.cell_coords[c][0] == 2]
    record = duplicate_cells(g, srcs, cuts)
    restore_connectivity(g, record)
    propagate_connectivity(vol, record, g)
    assign_virtual_tsdf(vol, record, g)
    after = marching_cubes(vol, g)
    count, labels = mesh_connected_components(after)
    assert count == 2
    # one piece on each side of the cut plane; the caps sit on the plane itself
    cut_x = 2.5 * g.spacing
    eps = 1e-9
    for lab in range(2):
        x = after.vertices[labels == lab, 0]
        assert np.all(x <= cut_x + eps) or np.all(x >= cut_x - eps)
    # both pieces are closed by their caps
    assert boundary_edge_count(after) == boundary_edge_count(before)


def test_components_and_cleanup():
    tri = np.array([[0, 1, 2], [3, 4, 5], [3, 5, 6]])
    v = np.random.default_rng(0).random((7, 3))
    mesh = CanonicalMesh(v, tri, np.zeros(7, np.int64), np.zeros((7, 2), np.int64))
    count, labels = mesh_connected_components(mesh)
    assert count == 2 and labels.tolist() == [0, 0, 0, 1, 1, 1, 1]
    small = remove_small_components(mesh, 0.9)
    assert small.n_vertices == 4 and len(small.triangles) == 2
    assert boundary_edge_count(mesh) == 3 + 4


def test_warp_mesh_rigid_and_stale():
    g, vol = sdf_volume(sphere(0.02))
    mesh = marching_cubes(vol, g)
    pose = GlobalPose(Rotation.from_rotvec([0.1, 0.2, 0.3]).as_matrix(), np.array([0.1, 0, 0]))
    live = warp_mesh(mesh, g, pose)
    assert np.allclose(live.vertices, pose.apply(mesh.vertices))
    bad = CanonicalMesh(mesh.vertices, mesh.triangles, mesh.edg_cell + 10**6, mesh.edge_keys)
    with pytest.raises(StaleReferenceError):
        warp_mesh(bad, g, pose)


def test_obj_and_ply_round_trip(tmp_path):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.5]], float)
    t = np.array([[0, 1, 2]])
    write_obj(tmp_path / "m.obj", v, t)
    rv, rt = read_obj(tmp_path / "m.obj")
    assert np.allclose(rv, v) and np.array_equal(rt, t)
    write_ply(tmp_path / "m.ply", v, t, labels=np.array([0, 0, 1]))
    pv, pt, pl = read_ply(tmp_path / "m.ply")
    assert np.allclose(pv, v) and np.array_equal(pt, t) and pl.tolist() == [0, 0, 1]
