"""Marching cubes over the non-manifold TSDF, mesh warping and mesh I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ._mc_tables import MC_CORNERS, MC_EDGE_CORNERS, MC_TRIANGLES
from .tsdf_volume import TsdfVolume
from .warp_field import CellLookupError, DeformGraph, GlobalPose, warp_points

_CORNERS = np.array(MC_CORNERS)
_EDGES = np.array(MC_EDGE_CORNERS)


class StaleReferenceError(LookupError):
    """A mesh vertex or frame record names a cell or node that no longer exists."""


@dataclass
class CanonicalMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    edg_cell: np.ndarray
    # (voxel copy a, voxel copy b) of the TSDF edge each vertex was cut from
    edge_keys: np.ndarray

    @classmethod
    def empty(cls) -> "CanonicalMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros(0, np.int64),
                   np.zeros((0, 2), np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices: np.ndarray) -> "CanonicalMesh":
        return CanonicalMesh(np.asarray(vertices), self.triangles, self.edg_cell, self.edge_keys)


def marching_cubes(volume: TsdfVolume, graph: DeformGraph) -> CanonicalMesh:
    """Extract the zero level set cell by cell, including duplicated cells.

    A vertex is identified by the two voxel copies of its TSDF edge, so cells
    that share voxel copies share vertices while duplicated cells that do not
    stay disconnected.
    """
    cells = graph.active_cells
    if len(cells) == 0:
        return CanonicalMesh.empty()
    volume.ensure_capacity(graph.n_nodes)
    nodes, blocks = volume.cell_voxel_ids(graph, cells)
    vals = volume.tsdf[nodes, blocks]
    wts = volume.weight[nodes, blocks]
    ids = nodes * volume.ratio**3 + blocks
    n_sub = volume.ratio
    sub = np.stack(np.meshgrid(*(np.arange(n_sub),) * 3, indexing="ij"), -1).reshape(-1, 3)
    # local voxel coords of the 8 corners of every TSDF cell, MC corner order
    corner_local = sub[:, None, :] + _CORNERS[None]
    cx, cy, cz = corner_local[..., 0], corner_local[..., 1], corner_local[..., 2]
    cube_vals = vals[:, cx, cy, cz].reshape(-1, 8)
    cube_wts = wts[:, cx, cy, cz].reshape(-1, 8)
    cube_ids = ids[:, cx, cy, cz].reshape(-1, 8)
    cube_cell = np.repeat(cells, len(sub))
    origin = graph.dims.position(graph.cell_coords[cells])
    cube_pos = (origin[:, None, None, :] + corner_local[None] * volume.voxel_size).reshape(-1, 8, 3)

    bits = (cube_vals < 0).astype(np.int64) << np.arange(8)
    case = bits.sum(axis=1)
    keep = np.all(cube_wts > 0, axis=1) & (case > 0) & (case < 255)
    cube_vals, cube_ids, cube_cell, cube_pos, case = (
        cube_vals[keep], cube_ids[keep], cube_cell[keep], cube_pos[keep], case[keep])
    if len(case) == 0:
        return CanonicalMesh.empty()

    tri_keys = []
    tri_cells = []
    for c in np.unique(case):
        table = MC_TRIANGLES[c]
        if not table:
            continue
        sel = np.flatnonzero(case == c)
        e = _EDGES[list(table)]  # (3 * ntri, 2) corner pairs
        a = cube_ids[sel][:, e[:, 0]]
        b = cube_ids[sel][:, e[:, 1]]
        keys = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=-1)
        tri_keys.append(keys.reshape(len(sel), -1, 3, 2).reshape(-1, 3, 2))
        tri_cells.append(np.repeat(cube_cell[sel], len(table) // 3))
    tri_keys = np.concatenate(tri_keys)
    tri_cells = np.concatenate(tri_cells)

    flat = tri_keys.reshape(-1, 2)
    uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    # the table winds triangles toward the negative side; flip to face outward
    triangles = inverse.reshape(-1, 3)[:, [0, 2, 1]]

    # vertex positions: interpolate once per unique key, always from the lower id
    all_ids = cube_ids.ravel()
    all_vals = cube_vals.ravel()
    all_pos = cube_pos.reshape(-1, 3)
    order = np.argsort(all_ids, kind="stable")
    sid = all_ids[order]
    first = np.concatenate([[True], sid[1:] != sid[:-1]])
    lut_ids = sid[first]
    lut_vals = all_vals[order][first]
    lut_pos = all_pos[order][first]
    ia = np.searchsorted(lut_ids, uniq[:, 0])
    ib = np.searchsorted(lut_ids, uniq[:, 1])
    da, db = lut_vals[ia], lut_vals[ib]
    frac = da / (da - db)
    vertices = lut_pos[ia] + frac[:, None] * (lut_pos[ib] - lut_pos[ia])

    vert_cell = np.full(len(uniq), np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(vert_cell, triangles.ravel(), np.repeat(tri_cells, 3))

    mesh = CanonicalMesh(vertices, triangles, vert_cell, uniq)
    return _clean(mesh)


def _clean(mesh: CanonicalMesh) -> CanonicalMesh:
    tri = mesh.triangles
    v = mesh.vertices
    distinct = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
    area = 0.5 * np.linalg.norm(np.cross(v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]]), axis=1)
    tri = tri[distinct & (area > 1e-12)]
    used = np.zeros(len(v), dtype=bool)
    used[tri.ravel()] = True
    remap = np.cumsum(used) - 1
    tri = remap[tri]
    # canonical triangle order: rotate smallest index first, then sort rows
    if len(tri):
        shift = np.argmin(tri, axis=1)
        rows = np.arange(len(tri))[:, None]
        tri = tri[rows, (shift[:, None] + np.arange(3)) % 3]
        tri = tri[np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))]
    return CanonicalMesh(v[used], tri.astype(np.int64), mesh.edg_cell[used], mesh.edge_keys[used])


def warp_mesh(mesh: CanonicalMesh, graph: DeformGraph, pose: GlobalPose) -> CanonicalMesh:
    if mesh.n_vertices == 0:
        return mesh
    cells = mesh.edg_cell
    bad = (cells < 0) | (cells >= graph.n_cells)
    if np.any(bad) or not np.all(graph._cell_active[cells]):
        raise StaleReferenceError("mesh vertex tagged with an inactive EDG cell")
    try:
        return mesh.with_vertices(warp_points(mesh.vertices, cells, graph, pose))
    except CellLookupError as exc:
        raise StaleReferenceError(str(exc)) from exc


def mesh_connected_components(mesh: CanonicalMesh) -> tuple[int, np.ndarray]:
    n = mesh.n_vertices
    if n == 0:
        return 0, np.zeros(0, dtype=np.int64)
    tri = mesh.triangles
    rows = np.concatenate([tri[:, 0], tri[:, 1], tri[:, 2]])
    cols = np.concatenate([tri[:, 1], tri[:, 2], tri[:, 0]])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    count, labels = connected_components(adj, directed=False)
    # relabel by smallest member vertex
    first = np.full(count, n, dtype=np.int64)
    np.minimum.at(first, labels, np.arange(n))
    rank = np.argsort(np.argsort(first))
    return int(count), rank[labels]


def remove_small_components(mesh: CanonicalMesh, min_fraction: float) -> CanonicalMesh:
    """Drop components with fewer than ``min_fraction`` of the largest one's vertices."""
    if min_fraction <= 0 or mesh.n_vertices == 0:
        return mesh
    count, labels = mesh_connected_components(mesh)
    if count < 2:
        return mesh
    sizes = np.bincount(labels, minlength=count)
    keep = sizes[labels] >= min_fraction * sizes.max()
    tri = mesh.triangles[keep[mesh.triangles[:, 0]]]
    return _clean(CanonicalMesh(mesh.vertices, tri, mesh.edg_cell, mesh.edge_keys))


def boundary_edge_count(mesh: CanonicalMesh) -> int:
    """Number of undirected edges not bordered by exactly two triangles."""
    tri = mesh.triangles
    if len(tri) == 0:
        return 0
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    e = np.sort(e, axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return int(np.sum(counts != 2))


def vertex_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    n = np.zeros_like(vertices, dtype=float)
    if len(triangles) == 0:
        return n
    fn = np.cross(vertices[triangles[:, 1]] - vertices[triangles[:, 0]],
                  vertices[triangles[:, 2]] - vertices[triangles[:, 0]])
    for i in range(3):
        np.add.at(n, triangles[:, i], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def write_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_ply(path, vertices: np.ndarray, triangles: np.ndarray, labels: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with normals and a per-vertex component label."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    if labels is None:
        labels = np.zeros(len(vertices), dtype=np.int64)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float nx\nproperty float ny\nproperty float nz\n"
        "property int component\n"
        f"element face {len(triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vdt = np.dtype([("p", "<f4", 3), ("n", "<f4", 3), ("c", "<i4")])
    vrec = np.zeros(len(vertices), dtype=vdt)
    vrec["p"] = vertices
    vrec["n"] = vertex_normals(vertices, triangles)
    vrec["c"] = labels
    fdt = np.dtype([("k", "u1"), ("i", "<i4", 3)])
    frec = np.zeros(len(triangles), dtype=fdt)
    frec["k"] = 3
    frec["i"] = triangles
    Path(path).write_bytes(header.encode("ascii") + vrec.tobytes() + frec.tobytes())


def read_ply(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = int(next(l for l in header if l.startswith("element vertex")).split()[-1])
    nf = int(next(l for l in header if l.startswith("element face")).split()[-1])
    vdt = np.dtype([("p", "<f4", 3), ("n", "<f4", 3), ("c", "<i4")])
    fdt = np.dtype([("k", "u1"), ("i", "<i4", 3)])
    v = np.frombuffer(data, dtype=vdt, count=nv, offset=end)
    f = np.frombuffer(data, dtype=fdt, count=nf, offset=end + nv * vdt.itemsize)
    return v["p"].astype(float), f["i"].astype(np.int64), v["c"].astype(np.int64)
