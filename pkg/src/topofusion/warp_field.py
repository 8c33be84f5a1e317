"""Non-manifold embedded deformation graph (EDG).

Nodes live on a regular lattice but each lattice point may carry several
independent copies (see :mod:`topofusion.grid_core`).  A cell is stored as the
8 node ids at its corners; corner ``c`` sits at lattice offset
``(c & 1, (c >> 1) & 1, (c >> 2) & 1)`` from the cell's left-front-bottom node.
"""
from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .grid_core import (
    BUCKET_CAPACITY,
    BucketGrid,
    CapacityError,
    CopyRef,
    GridDims,
    StructuralError,
    UnionFind,
    linear_index,
    union_find_resolve,
)

CORNER_OFFSETS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)
# the 12 lattice edges of a cube as (lower corner, upper corner)
CUBE_EDGES = tuple((a, a | bit) for a in range(8) for bit in (1, 2, 4) if not a & bit)
# new cells share a node only if it moves within this many cell lengths of them
REUSE_TOLERANCE = 0.25


class CellLookupError(KeyError):
    """Raised when a cell reference does not name an active cell."""


@dataclass
class GlobalPose:
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "GlobalPose":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def inverse(self) -> "GlobalPose":
        return GlobalPose(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "GlobalPose") -> "GlobalPose":
        """``self after other``."""
        return GlobalPose(self.R @ other.R, self.R @ other.t + self.t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def copy(self) -> "GlobalPose":
        return GlobalPose(self.R.copy(), self.t.copy())


@dataclass
class EdgNode:
    """Read-only view of one node copy."""

    node_id: int
    position: np.ndarray
    displacement: np.ndarray
    rotation: np.ndarray
    is_real: bool
    parent_id: int
    self_ref: CopyRef
    cell_offsets: tuple[int, ...]
    active: bool


class DeformGraph:
    """Sparse lattice of node copies plus the active cells built from them."""

    def __init__(self, dims: GridDims):
        self.dims = dims
        self.grid: BucketGrid[int] = BucketGrid(dims)
        cap = 64
        self._coord = np.zeros((cap, 3), dtype=np.int64)
        self._t = np.zeros((cap, 3))
        self._R = np.tile(np.eye(3), (cap, 1, 1))
        self._is_real = np.ones(cap, dtype=bool)
        self._parent = np.zeros(cap, dtype=np.int64)
        self._offset = np.zeros(cap, dtype=np.int64)
        # node a new copy was made from (-1 for nodes that existed from the start)
        self._origin = np.full(cap, -1, dtype=np.int64)
        # existing node whose displacement seeded an expanded node (-1 if none)
        self._seed = np.full(cap, -1, dtype=np.int64)
        self.n_nodes = 0
        self._cell_coord = np.zeros((cap, 3), dtype=np.int64)
        self._cell_nodes = np.zeros((cap, 8), dtype=np.int64)
        self._cell_active = np.zeros(cap, dtype=bool)
        self.n_cells = 0
        self._cells_at: dict[int, list[int]] = defaultdict(list)
        self.version = 0

    # -- storage -----------------------------------------------------------
    def _grow_nodes(self, need: int) -> None:
        cap = len(self._coord)
        if need <= cap:
            return
        new = max(need, 2 * cap)
        pad = new - cap
        self._coord = np.concatenate([self._coord, np.zeros((pad, 3), np.int64)])
        self._t = np.concatenate([self._t, np.zeros((pad, 3))])
        self._R = np.concatenate([self._R, np.tile(np.eye(3), (pad, 1, 1))])
        self._is_real = np.concatenate([self._is_real, np.ones(pad, bool)])
        self._parent = np.concatenate([self._parent, np.zeros(pad, np.int64)])
        self._offset = np.concatenate([self._offset, np.zeros(pad, np.int64)])
        self._origin = np.concatenate([self._origin, np.full(pad, -1, np.int64)])
        self._seed = np.concatenate([self._seed, np.full(pad, -1, np.int64)])

    def _grow_cells(self, need: int) -> None:
        cap = len(self._cell_coord)
        if need <= cap:
            return
        new = max(need, 2 * cap)
        pad = new - cap
        self._cell_coord = np.concatenate([self._cell_coord, np.zeros((pad, 3), np.int64)])
        self._cell_nodes = np.concatenate([self._cell_nodes, np.zeros((pad, 8), np.int64)])
        self._cell_active = np.concatenate([self._cell_active, np.zeros(pad, bool)])

    def add_node(self, coord, t=None, R=None, is_real=True, origin=-1, seed=-1) -> int:
        index1d = linear_index(coord, self.dims)
        node_id = self.n_nodes
        ref = self.grid.insert(index1d, node_id)
        self._grow_nodes(node_id + 1)
        self._coord[node_id] = coord
        self._t[node_id] = np.zeros(3) if t is None else t
        self._R[node_id] = np.eye(3) if R is None else R
        self._is_real[node_id] = is_real
        self._parent[node_id] = node_id
        self._offset[node_id] = ref.bucket_offset
        self._origin[node_id] = origin
        self._seed[node_id] = seed
        self.n_nodes += 1
        return node_id

    def add_cell(self, coord, node_ids) -> int:
        cid = self.n_cells
        self._grow_cells(cid + 1)
        self._cell_coord[cid] = coord
        self._cell_nodes[cid] = node_ids
        self._cell_active[cid] = True
        self._cells_at[self.cell_index1d(coord)].append(cid)
        self.n_cells += 1
        self.version += 1
        return cid

    def deactivate_cell(self, cid: int) -> None:
        self._cell_active[cid] = False
        self._cells_at[self.cell_index1d(self._cell_coord[cid])].remove(cid)
        self.version += 1

    def cell_index1d(self, coord) -> int:
        return linear_index(coord, self.dims)

    # -- accessors ---------------------------------------------------------
    @property
    def spacing(self) -> float:
        return self.dims.spacing

    @property
    def coords(self) -> np.ndarray:
        return self._coord[: self.n_nodes]

    @property
    def positions(self) -> np.ndarray:
        return self.dims.position(self.coords)

    @property
    def t(self) -> np.ndarray:
        return self._t[: self.n_nodes]

    @t.setter
    def t(self, value) -> None:
        self._t[: self.n_nodes] = value

    @property
    def R(self) -> np.ndarray:
        return self._R[: self.n_nodes]

    @R.setter
    def R(self, value) -> None:
        self._R[: self.n_nodes] = value

    @property
    def is_real(self) -> np.ndarray:
        return self._is_real[: self.n_nodes]

    @property
    def parent_ids(self) -> np.ndarray:
        return self._parent[: self.n_nodes]

    @property
    def origins(self) -> np.ndarray:
        return self._origin[: self.n_nodes]

    @property
    def seeds(self) -> np.ndarray:
        return self._seed[: self.n_nodes]

    def provenance(self, node_id: int) -> int:
        """Node this one was derived from (copy origin or expansion seed), or -1."""
        o = int(self._origin[node_id])
        return o if o >= 0 else int(self._seed[node_id])

    @property
    def cell_nodes(self) -> np.ndarray:
        return self._cell_nodes[: self.n_cells]

    @property
    def cell_coords(self) -> np.ndarray:
        return self._cell_coord[: self.n_cells]

    @property
    def active_cells(self) -> np.ndarray:
        return np.flatnonzero(self._cell_active[: self.n_cells])

    def is_active_cell(self, cid: int) -> bool:
        return 0 <= cid < self.n_cells and bool(self._cell_active[cid])

    def cells_at(self, coord) -> list[int]:
        return list(self._cells_at.get(self.cell_index1d(coord), ()))

    def node_ref(self, node_id: int) -> CopyRef:
        return CopyRef(linear_index(self._coord[node_id], self.dims), int(self._offset[node_id]))

    def node_at(self, ref: CopyRef) -> int:
        return self.grid.get(ref)

    def node_active(self) -> np.ndarray:
        active = np.zeros(self.n_nodes, dtype=bool)
        active[self.cell_nodes[self.active_cells].ravel()] = True
        return active

    def node(self, node_id: int) -> EdgNode:
        offsets = (-1,) * 8
        coord = self._coord[node_id]
        for cid in self._cells_at.get(self.cell_index1d(coord), ()):
            if self._cell_nodes[cid, 0] == node_id:
                offsets = tuple(int(self._offset[n]) for n in self._cell_nodes[cid])
        return EdgNode(
            node_id=node_id,
            position=self.dims.position(coord),
            displacement=self._t[node_id].copy(),
            rotation=self._R[node_id].copy(),
            is_real=bool(self._is_real[node_id]),
            parent_id=int(self._parent[node_id]),
            self_ref=self.node_ref(node_id),
            cell_offsets=offsets,
            active=bool(self.node_active()[node_id]),
        )

    def cell_origin(self, cid: int) -> np.ndarray:
        return self.dims.position(self._cell_coord[cid])

    def affiliation_counts(self) -> np.ndarray:
        return np.bincount(self.cell_nodes[self.active_cells].ravel(), minlength=self.n_nodes)

    def node_cell_table(self) -> np.ndarray:
        """``table[n, c]`` = active cell in which node ``n`` is corner ``c`` (or -1)."""
        table = np.full((self.n_nodes, 8), -1, dtype=np.int64)
        for cid in self.active_cells[::-1]:
            table[self._cell_nodes[cid], np.arange(8)] = cid
        return table

    def edges(self) -> np.ndarray:
        """Unique lattice edges of all active cells as ``(owner, other)`` rows.

        The owner is the endpoint at the lower lattice coordinate.
        """
        cells = self.active_cells
        if len(cells) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        nodes = self._cell_nodes[cells]
        pairs = np.concatenate([nodes[:, [a, b]] for a, b in CUBE_EDGES])
        return np.unique(pairs, axis=0)

    def copy(self) -> "DeformGraph":
        other = DeformGraph.__new__(DeformGraph)
        other.dims = self.dims
        other.grid = BucketGrid(self.dims)
        for idx, bucket in self.grid.buckets.items():
            b = type(bucket)(slots=list(bucket.slots), used=bucket.used)
            other.grid.buckets[idx] = b
        for name in ("_coord", "_t", "_R", "_is_real", "_parent", "_offset", "_origin", "_seed",
                     "_cell_coord", "_cell_nodes", "_cell_active"):
            setattr(other, name, getattr(self, name).copy())
        other.n_nodes = self.n_nodes
        other.n_cells = self.n_cells
        other._cells_at = defaultdict(list, {k: list(v) for k, v in self._cells_at.items()})
        other.version = self.version
        return other

    def dump(self, path, line_process: dict | None = None) -> None:
        """Write nodes, cells and edges (with line-process weights) as text."""
        line_process = line_process or {}
        active = self.node_active()
        lines = [f"# edg nodes {self.n_nodes} spacing {self.spacing:.9g}",
                 "# id index1d offset x y z tx ty tz real active parent"]
        pos = self.positions
        for n in range(self.n_nodes):
            ref = self.node_ref(n)
            lines.append(
                f"n {n} {ref.index1d} {ref.bucket_offset} "
                + " ".join(f"{v:.9g}" for v in pos[n])
                + " " + " ".join(f"{v:.9g}" for v in self._t[n])
                + f" {int(self._is_real[n])} {int(active[n])} {int(self._parent[n])}"
            )
        cells = self.active_cells
        lines.append(f"# cells {len(cells)}")
        lines.append("# id cx cy cz node0 .. node7")
        for cid in cells:
            lines.append(f"c {cid} " + " ".join(str(v) for v in self._cell_coord[cid])
                         + " " + " ".join(str(v) for v in self._cell_nodes[cid]))
        edges = self.edges()
        lines.append(f"# edges {len(edges)}")
        lines.append("# i j l")
        for i, j in edges:
            lines.append(f"e {i} {j} {line_process.get((int(i), int(j)), 1.0):.9g}")
        Path(path).write_text("\n".join(lines) + "\n")


# -- warp evaluation ---------------------------------------------------------

def trilinear_from_local(u: np.ndarray) -> np.ndarray:
    """Trilinear corner weights for local coordinates ``u`` in the unit cube."""
    u = np.asarray(u, dtype=float)
    w = np.ones(u.shape[:-1] + (8,))
    for c in range(8):
        for axis in range(3):
            if CORNER_OFFSETS[c, axis]:
                w[..., c] *= u[..., axis]
            else:
                w[..., c] *= 1.0 - u[..., axis]
    return w


def trilinear_weights(x_c, graph: DeformGraph, cell: int) -> np.ndarray:
    if not graph.is_active_cell(cell):
        raise CellLookupError(f"cell {cell} is not active")
    u = (np.asarray(x_c, dtype=float) - graph.cell_origin(cell)) / graph.spacing
    if np.any(u < -1e-9) or np.any(u > 1 + 1e-9):
        raise ValueError(f"point {x_c} lies outside cell {cell}")
    return trilinear_from_local(np.clip(u, 0.0, 1.0))


def warp_point(x_c, cell: int, graph: DeformGraph, pose: GlobalPose) -> np.ndarray:
    w = trilinear_weights(x_c, graph, cell)
    nodes = graph.cell_nodes[cell]
    # sum_i a_i (x + t_i) = x + sum_i a_i t_i because the weights sum to one
    return pose.R @ (np.asarray(x_c, dtype=float) + w @ graph.t[nodes]) + pose.t


def interpolation_weights(points: np.ndarray, cells: np.ndarray, graph: DeformGraph):
    """Corner node ids and trilinear weights for many points at once."""
    cells = np.asarray(cells, dtype=np.int64)
    if len(cells) and not np.all(graph._cell_active[cells]):
        raise CellLookupError("stale cell reference")
    origin = graph.dims.position(graph._cell_coord[cells])
    u = np.clip((np.asarray(points) - origin) / graph.spacing, 0.0, 1.0)
    return graph._cell_nodes[cells], trilinear_from_local(u)


def warp_points(points: np.ndarray, cells: np.ndarray, graph: DeformGraph, pose: GlobalPose,
                t: np.ndarray | None = None) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return points.reshape(0, 3)
    nodes, w = interpolation_weights(points, cells, graph)
    disp = graph.t if t is None else t
    shifted = points + np.einsum("nc,ncd->nd", w, disp[nodes])
    return pose.apply(shifted)


# -- connectivity update -----------------------------------------------------

def cube_components(cut_corner_edges: Iterable[tuple[int, int]]) -> np.ndarray:
    """Component label per corner of the cube graph minus the given edges.

    Labels are the smallest corner index in each component.
    """
    cut = {tuple(sorted(e)) for e in cut_corner_edges}
    valid = set(CUBE_EDGES)
    for e in cut:
        if e not in valid:
            raise ValueError(f"{e} is not a cube edge")
    adj = defaultdict(list)
    for a, b in CUBE_EDGES:
        if (a, b) not in cut:
            adj[a].append(b)
            adj[b].append(a)
    labels = np.full(8, -1, dtype=np.int64)
    for start in range(8):
        if labels[start] >= 0:
            continue
        labels[start] = start
        queue = deque([start])
        while queue:
            v = queue.popleft()
            for w in adj[v]:
                if labels[w] < 0:
                    labels[w] = start
                    queue.append(w)
    return labels


def _edge_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def separate_cell(graph: DeformGraph, cell: int, cutting_edges: Iterable[tuple[int, int]]) -> np.ndarray:
    """Partition the 8 corners of ``cell`` after removing ``cutting_edges``.

    ``cutting_edges`` are node-id pairs and must all be lattice edges of the cell.
    """
    if not graph.is_active_cell(cell):
        raise CellLookupError(f"cell {cell} is not active")
    nodes = graph.cell_nodes[cell]
    corner_of_edge = {_edge_key(int(nodes[a]), int(nodes[b])): (a, b) for a, b in CUBE_EDGES}
    corner_cuts = []
    for e in cutting_edges:
        key = _edge_key(int(e[0]), int(e[1]))
        if key not in corner_of_edge:
            raise ValueError(f"edge {key} does not belong to cell {cell}")
        corner_cuts.append(corner_of_edge[key])
    return cube_components(corner_cuts)


def cell_cut_corner_edges(graph: DeformGraph, cell: int, cutting: set) -> list[tuple[int, int]]:
    nodes = graph.cell_nodes[cell]
    return [(a, b) for a, b in CUBE_EDGES if _edge_key(int(nodes[a]), int(nodes[b])) in cutting]


@dataclass
class DuplicateCell:
    source_cell: int
    coord: np.ndarray
    label: int
    corner_labels: np.ndarray
    copies: list[int]  # pending copy id per corner
    real_nodes: frozenset
    cell_id: int = -1


@dataclass
class PendingCopy:
    copy_id: int
    source_node: int
    is_real: bool
    dup: int
    corner: int
    parent: int = -1  # in the combined (existing nodes + pending copies) id space


@dataclass
class DuplicationRecord:
    cutting_edges: set
    dups: list[DuplicateCell] = field(default_factory=list)
    copies: list[PendingCopy] = field(default_factory=list)
    source_labels: dict = field(default_factory=dict)
    # filled by restore_connectivity
    copy_to_node: dict = field(default_factory=dict)
    new_nodes: list[int] = field(default_factory=list)
    replaced_cells: dict = field(default_factory=dict)
    applied: bool = False

    @property
    def duplicated_sources(self) -> list[int]:
        """Source cells that actually split into more than one component."""
        return [c for c, lab in self.source_labels.items() if len(set(lab.tolist())) > 1]

    def dups_of(self, source_cell: int) -> list[DuplicateCell]:
        return [d for d in self.dups if d.source_cell == source_cell]


def duplicate_cells(graph: DeformGraph, candidate_cells: Iterable[int], cutting_edges) -> DuplicationRecord:
    """Split each candidate cell into one duplicate per corner component.

    Nothing in ``graph`` is modified; the returned record holds the pending node
    copies that :func:`restore_connectivity` merges and commits.
    """
    cutting = {_edge_key(int(a), int(b)) for a, b in cutting_edges}
    record = DuplicationRecord(cutting_edges=cutting)
    for cid in sorted(set(int(c) for c in candidate_cells)):
        if not graph.is_active_cell(cid):
            raise CellLookupError(f"candidate cell {cid} is not active")
        labels = cube_components(cell_cut_corner_edges(graph, cid, cutting))
        record.source_labels[cid] = labels
        nodes = graph.cell_nodes[cid]
        for lab in sorted(set(labels.tolist())):
            d = len(record.dups)
            copies = []
            for corner in range(8):
                pc = PendingCopy(len(record.copies), int(nodes[corner]), bool(labels[corner] == lab), d, corner)
                record.copies.append(pc)
                copies.append(pc.copy_id)
            real = frozenset(int(nodes[c]) for c in range(8) if labels[c] == lab)
            record.dups.append(DuplicateCell(cid, graph.cell_coords[cid].copy(), lab, labels, copies, real))
    _assign_parents(graph, record)
    return record


def _cells_real_nodes(graph: DeformGraph, node: int, table: np.ndarray) -> set:
    out = set()
    for cid in table[node]:
        if cid >= 0:
            for n in graph.cell_nodes[cid]:
                if graph.is_real[n]:
                    out.add(int(n))
    return out


def _assign_parents(graph: DeformGraph, record: DuplicationRecord) -> None:
    """Encode the merge rules as parent ids.

    Real copies point at the node they were copied from.  Virtual copies of the
    same source node in different cells are merged when their duplicates share
    a real node; the class then points at its first member.
    """
    base = graph.n_nodes
    uf = UnionFind(base + len(record.copies))
    source_cells_of: dict[int, set] = defaultdict(set)
    for pc in record.copies:
        source_cells_of[base + pc.copy_id].add(record.dups[pc.dup].source_cell)

    def try_union(a: int, b: int) -> None:
        ra, rb = uf.find(a), uf.find(b)
        if ra == rb or source_cells_of[ra] & source_cells_of[rb]:
            return  # two duplicates of one cell must keep distinct copies
        uf.union(ra, rb)
        root = uf.find(ra)
        source_cells_of[root] = source_cells_of[ra] | source_cells_of[rb]

    by_source: dict[int, list[PendingCopy]] = defaultdict(list)
    for pc in record.copies:
        if pc.is_real:
            uf.union(pc.source_node, base + pc.copy_id)
        else:
            by_source[pc.source_node].append(pc)

    table = graph.node_cell_table()
    candidates = set(record.source_labels)
    for src in sorted(by_source):
        group = by_source[src]
        for i, p in enumerate(group):
            dp = record.dups[p.dup]
            for q in group[i + 1:]:
                dq = record.dups[q.dup]
                if dp.source_cell != dq.source_cell and dp.real_nodes & dq.real_nodes:
                    try_union(base + p.copy_id, base + q.copy_id)
        # earlier virtual copies of the same original at this lattice point
        index1d = linear_index(graph.coords[src], graph.dims)
        root_src = _root_origin(graph, src)
        for _, other in graph.grid.copies(index1d):
            if other == src or graph.is_real[other] or _root_origin(graph, other) != root_src:
                continue
            other_cells = {int(c) for c in table[other] if c >= 0}
            if not other_cells or other_cells & candidates:
                continue
            reals = _cells_real_nodes(graph, other, table)
            for p in group:
                if record.dups[p.dup].real_nodes & reals:
                    source_cells_of[other] |= other_cells
                    try_union(other, base + p.copy_id)

    parents = [uf.find(i) for i in range(base + len(record.copies))]
    for pc in record.copies:
        pc.parent = parents[base + pc.copy_id]


def _root_origin(graph: DeformGraph, node: int) -> int:
    seen = set()
    while graph.origins[node] >= 0:
        if node in seen:
            raise StructuralError("cyclic copy provenance")
        seen.add(node)
        node = int(graph.origins[node])
    return node


def restore_connectivity(graph: DeformGraph, record: DuplicationRecord) -> DeformGraph:
    """Merge pending copies via union-find and commit duplicates to ``graph``."""
    if record.applied:
        raise StructuralError("duplication record already applied")
    base = graph.n_nodes
    parents = list(range(base)) + [pc.parent for pc in record.copies]
    roots = union_find_resolve(parents)

    # classes that need a fresh node, in deterministic order
    fresh: dict[int, list[PendingCopy]] = {}
    for pc in record.copies:
        r = roots[base + pc.copy_id]
        if r >= base:
            fresh.setdefault(r, []).append(pc)

    per_point = defaultdict(list)
    for r, members in fresh.items():
        per_point[linear_index(graph.coords[members[0].source_node], graph.dims)].append(r)
    folded: dict[int, int] = {}
    for index1d, classes in per_point.items():
        bucket = graph.grid.buckets.get(index1d)
        used = bucket.used if bucket else 0
        if used + len(classes) > BUCKET_CAPACITY:
            folded.update(_fold_virtual(graph, record, index1d, {r: fresh[r] for r in classes},
                                        used + len(classes) - BUCKET_CAPACITY))
            extra = len(classes) - sum(1 for r in classes if r in folded)
            if used + extra > BUCKET_CAPACITY:
                raise CapacityError(f"grid point {index1d} would need {used + extra} node copies", index1d)
    for r in folded:
        for pc in fresh.pop(r):
            record.copy_to_node[pc.copy_id] = folded[r]

    positions = graph.positions
    for r in sorted(fresh):
        first = fresh[r][0]
        dup = record.dups[first.dup]
        real = sorted(dup.real_nodes)
        src = first.source_node
        t = graph.t[real].mean(axis=0)
        dist = np.linalg.norm(positions[real] - positions[src], axis=1)
        nearest = real[int(np.argmin(dist))]
        nid = graph.add_node(graph.coords[src].copy(), t=t, R=graph.R[nearest].copy(),
                             is_real=False, origin=src)
        graph._parent[nid] = src
        record.new_nodes.append(nid)
        for pc in fresh[r]:
            record.copy_to_node[pc.copy_id] = nid
    for pc in record.copies:
        r = roots[base + pc.copy_id]
        if r < base:
            record.copy_to_node[pc.copy_id] = r

    for src_cell in sorted(record.source_labels):
        dups = record.dups_of(src_cell)
        lfb_label = int(record.source_labels[src_cell][0])
        coord = graph.cell_coords[src_cell].copy()
        graph.deactivate_cell(src_cell)
        new_ids = []
        for d in dups:
            nodes = [record.copy_to_node[c] for c in d.copies]
            if d.label == lfb_label:
                graph._cell_nodes[src_cell] = nodes
                graph._cell_active[src_cell] = True
                graph._cells_at[graph.cell_index1d(coord)].append(src_cell)
                d.cell_id = src_cell
            else:
                d.cell_id = graph.add_cell(coord, nodes)
            new_ids.append(d.cell_id)
        record.replaced_cells[src_cell] = sorted(new_ids)
    graph.version += 1
    record.applied = True
    return graph


def _fold_virtual(graph: DeformGraph, record: DuplicationRecord, index1d: int, classes: dict, need: int) -> dict:
    """Map up to ``need`` pending virtual classes onto existing virtual copies.

    Only used when a bucket would overflow.  A class may reuse a virtual node
    of the same original that none of its source cells already holds; the
    closest displacement wins.  Virtual nodes carry no observations, so sharing
    one only couples padding cells.
    """
    table = graph.node_cell_table()
    pool = []
    for _, nid in graph.grid.copies(index1d):
        if not graph.is_real[nid]:
            pool.append((int(nid), {int(c) for c in table[nid] if c >= 0}))
    out: dict[int, int] = {}
    taken: dict[int, set] = {nid: set() for nid, _ in pool}
    for r in sorted(classes):
        if len(out) >= need:
            break
        members = classes[r]
        cells = {record.dups[pc.dup].source_cell for pc in members}
        root = _root_origin(graph, members[0].source_node)
        t = graph.t[sorted(record.dups[members[0].dup].real_nodes)].mean(axis=0)
        best, best_d = -1, np.inf
        for nid, ncells in pool:
            if _root_origin(graph, nid) != root or ncells & cells or taken[nid] & cells:
                continue
            d = float(np.linalg.norm(graph.t[nid] - t))
            if d < best_d:
                best, best_d = nid, d
        if best >= 0:
            out[r] = best
            taken[best] |= cells
    return out


def expand_graph(graph: DeformGraph, newly_observed_cells: Iterable, extrapolate: bool = False,
                 displacements=None, reuse_tolerance: float = REUSE_TOLERANCE) -> list[int]:
    """Activate lattice cells, reusing existing corner nodes.

    New nodes start with identity rotation and zero displacement unless
    ``extrapolate`` is set, in which case they copy the displacement of the
    nearest pre-existing active node.  ``displacements`` gives an estimated
    displacement per cell (aligned with ``newly_observed_cells``); then an
    existing node is reused only if it moves within ``reuse_tolerance`` cell
    lengths of the estimate, otherwise a new copy is added at that lattice
    point, and new nodes start from the estimate.  Returns the created cell ids.
    """
    given = [tuple(int(v) for v in c) for c in newly_observed_cells]
    est = {}
    if displacements is not None:
        displacements = np.asarray(displacements, dtype=float).reshape(-1, 3)
        if len(displacements) != len(given):
            raise ValueError("one displacement per cell is required")
        for c, d in zip(given, displacements):
            est.setdefault(c, d)
    coords = sorted(set(given), key=lambda c: (c[2], c[1], c[0]))
    limit = np.array(graph.dims.shape) - 1
    for c in coords:
        if np.any(np.array(c) < 0) or np.any(np.array(c) >= limit):
            raise IndexError(f"cell {c} outside the graph lattice")
    created = []
    seed_pos = seed_ids = None
    if extrapolate:
        active = np.flatnonzero(graph.node_active())
        if len(active):
            seed_ids = active
            seed_pos = graph.coords[active].astype(float)
    tol = reuse_tolerance * graph.spacing
    for c in coords:
        if graph.cells_at(c):
            continue
        nodes = []
        for corner in range(8):
            p = np.array(c) + CORNER_OFFSETS[corner]
            nodes.append(_reusable_node(graph, p, seed_pos, seed_ids, est.get(c), tol))
        created.append(graph.add_cell(np.array(c), nodes))
    return created


def _reusable_node(graph: DeformGraph, p, seed_pos, seed_ids, t_est=None, tol: float = 0.0) -> int:
    index1d = linear_index(p, graph.dims)
    copies = [n for _, n in graph.grid.copies(index1d)]
    if t_est is not None:
        copies = [n for n in copies if np.linalg.norm(graph.t[n] - t_est) <= tol]
    if copies:
        real = [n for n in copies if graph.is_real[n]]
        return min(real) if real else min(copies)
    t = None
    seed = -1
    if seed_pos is not None:
        k = int(np.argmin(np.sum((seed_pos - p) ** 2, axis=1)))
        seed = int(seed_ids[k])
        t = graph.t[seed].copy()
    if t_est is not None:
        t = np.asarray(t_est, dtype=float).copy()
    return graph.add_node(p, t=t, seed=seed)
