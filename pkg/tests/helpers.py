"""Shared builders for small synthetic problems."""
import itertools
from collections import deque

import numpy as np
from scipy.spatial.transform import Rotation

from topofusion.grid_core import GridDims
from topofusion.registration import CorrespondenceSet, SolverConfig
from topofusion.warp_field import CUBE_EDGES, DeformGraph, GlobalPose, expand_graph


def cube_graph(n_cells=2, spacing=0.012, origin=(-0.012, -0.012, 0.3)) -> DeformGraph:
    """(n_cells+1)^3 nodes; n_cells=2 gives the 27-node graph."""
    dims = GridDims(n_cells + 2, n_cells + 2, n_cells + 2, origin=origin, spacing=spacing)
    g = DeformGraph(dims)
    expand_graph(g, list(itertools.product(range(n_cells), repeat=3)))
    return g


def random_problem(seed: int, n_dense: int = 60, n_sparse: int = 5, config: SolverConfig | None = None):
    """Random 27-node graph, state, correspondences and line-process weights."""
    rng = np.random.default_rng(seed)
    g = cube_graph()
    s = g.spacing
    g.t = rng.normal(scale=0.2 * s, size=(g.n_nodes, 3))
    g.R = Rotation.from_rotvec(rng.normal(scale=0.1, size=(g.n_nodes, 3))).as_matrix()
    cells = rng.choice(g.active_cells, size=n_dense)
    pts = g.dims.position(g.cell_coords[cells]) + rng.random((n_dense, 3)) * s
    normals = rng.normal(size=(n_dense, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    targets = pts + rng.normal(scale=0.3 * s, size=(n_dense, 3))
    corr = CorrespondenceSet(pts, cells, targets, normals, np.arange(n_dense))
    if n_sparse:
        sc = rng.choice(g.active_cells, size=n_sparse)
        sp_pts = g.dims.position(g.cell_coords[sc]) + rng.random((n_sparse, 3)) * s
        corr = corr.with_sparse(sp_pts, sc, sp_pts + rng.normal(scale=0.3 * s, size=(n_sparse, 3)))
    edges = g.edges()
    l = rng.uniform(0.05, 1.0, size=len(edges))
    pose = GlobalPose(Rotation.from_rotvec(rng.normal(scale=0.05, size=3)).as_matrix(),
                      rng.normal(scale=0.01, size=3))
    return g, pose, corr, edges, l, config or SolverConfig()


def make_graph(cells, shape=(5, 5, 5), spacing=0.1):
    g = DeformGraph(GridDims(*shape, origin=(0.0, 0.0, 0.0), spacing=spacing))
    expand_graph(g, cells)
    return g


def two_cell_split_graph():
    # left cell at x=0 and the cut cell next to it at x=1
    g = make_graph([(0, 0, 0), (1, 0, 0)], shape=(4, 3, 3))
    right = g.cells_at((1, 0, 0))[0]
    nodes = g.cell_nodes[right]
    cuts = {tuple(sorted((int(nodes[a]), int(nodes[b])))) for a, b in CUBE_EDGES if b - a == 1}
    return g, right, cuts


def bfs_components(cut):
    """Component labels of the 8 cube corners by breadth-first search (smallest corner labels)."""
    adj = {v: [] for v in range(8)}
    for a, b in CUBE_EDGES:
        if (a, b) not in cut:
            adj[a].append(b)
            adj[b].append(a)
    labels = [-1] * 8
    for s in range(8):
        if labels[s] >= 0:
            continue
        labels[s] = s
        q = deque([s])
        while q:
            v = q.popleft()
            for w in adj[v]:
                if labels[w] < 0:
                    labels[w] = s
                    q.append(w)
    return labels
