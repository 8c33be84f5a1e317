"""Non-manifold TSDF grid tied to the deformation graph.

The TSDF lattice is ``2k+1`` times finer than the EDG lattice and shares its
origin, so EDG node ``p`` sits on voxel ``(2k+1) * p``.  Every voxel is owned by
the nearest EDG node along each axis, which gives each node copy a
``(2k+1)^3`` block of voxels.  A voxel copy is therefore the pair
``(node copy, position in block)``: duplicating an EDG node duplicates the
voxels it controls, and merging node copies merges their voxels.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .grid_core import BucketGrid, CopyRef, GridDims
from .warp_field import CORNER_OFFSETS, DeformGraph, DuplicationRecord, GlobalPose, warp_points

TRUNCATION_VOXELS = 2.5
W_NEW = 1.0
W_MAX = 64.0
VIRTUAL_BOOTSTRAP_WEIGHT = 1.0
# floor on the ray/normal cosine used when converting ray to plane distances
MIN_COS = 0.2
# activation pull-back: candidate anchors per point and normal agreement
ANCHOR_NEIGHBOURS = 8
ANCHOR_MIN_COS = 0.5

SNAPSHOT_MAGIC = b"TSDFSNP1"
SNAPSHOT_RECORD = struct.Struct("<3i2fIBB")


@dataclass
class DepthFrame:
    depth: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    # optional known world-to-camera pose (synthetic rigs)
    camera_pose: GlobalPose | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        if self.depth.ndim != 2:
            raise ValueError("depth must be a 2D image")
        if np.any(self.depth < 0) or not np.all(np.isfinite(self.depth)):
            raise ValueError("depth must be finite and non-negative (0 marks invalid)")

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def backproject(self) -> np.ndarray:
        """Per-pixel camera-space points, shape ``(h, w, 3)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        z = self.depth
        return np.stack([(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z], axis=-1)

    def normals(self) -> np.ndarray:
        """Unit normals from central differences (zero where undefined)."""
        pts = self.backproject()
        valid = self.valid
        n = np.zeros_like(pts)
        dx = pts[1:-1, 2:] - pts[1:-1, :-2]
        dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
        cross = np.cross(dx, dy)
        ok = (valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1] & valid[1:-1, 1:-1])
        # reject normals across depth discontinuities
        limit = 0.05 * np.maximum(self.depth[1:-1, 1:-1], 1e-9) + 1e-3
        span = np.maximum(np.abs(dx[..., 2]), np.abs(dy[..., 2]))
        ok &= span < limit
        # a thin strip at a different depth passes the span test, so also
        # bound each one-pixel step from the centre
        z = pts[..., 2]
        c = z[1:-1, 1:-1]
        step = np.max(np.abs(np.stack([z[1:-1, 2:], z[1:-1, :-2], z[2:, 1:-1], z[:-2, 1:-1]]) - c), axis=0)
        ok &= step < 0.5 * limit
        norm = np.linalg.norm(cross, axis=-1)
        ok &= norm > 0
        inner = np.zeros_like(cross)
        inner[ok] = cross[ok] / norm[ok, None]
        # orient towards the camera
        flip = np.sum(inner * pts[1:-1, 1:-1], axis=-1) > 0
        inner[flip] *= -1
        n[1:-1, 1:-1] = inner
        return n

    def project(self, points: np.ndarray):
        """Nearest pixel of camera-space points; returns ``(u, v, in_image)``."""
        z = points[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.round(self.fx * points[:, 0] / z + self.cx)
            v = np.round(self.fy * points[:, 1] / z + self.cy)
        ok = (z > 0) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        u = np.where(ok, u, 0).astype(np.int64)
        v = np.where(ok, v, 0).astype(np.int64)
        return u, v, ok


@dataclass
class Voxel:
    """Read-only view of one voxel copy."""

    tsdf: float
    weight: float
    node_assoc: CopyRef
    is_real: bool
    parent_id: int
    self_ref: CopyRef
    cell_voxel_offsets: tuple[int, ...]


def voxel_ownership(voxel_coord, k: int) -> tuple[int, int, int]:
    """EDG lattice coordinate of the node controlling a voxel."""
    b = 2 * k + 1
    return tuple(int((int(v) + k) // b) for v in voxel_coord)


@dataclass
class TsdfDuplication:
    """TSDF side of one connectivity update."""

    # source EDG cell -> voxel component label per local voxel, shape (2k+2,)*3
    voxel_labels: dict = field(default_factory=dict)
    # source EDG cell -> number of TSDF cell copies created
    tsdf_cell_copies: dict = field(default_factory=dict)
    # source EDG cell -> list of cutting TSDF edges as pairs of local voxel coords
    cutting_edges: dict = field(default_factory=dict)


class TsdfVolume:
    def __init__(self, edg_dims: GridDims, k: int, truncation: float | None = None,
                 w_max: float = W_MAX):
        if k not in (1, 2, 3):
            raise ValueError("k must be 1, 2 or 3")
        self.k = k
        self.ratio = 2 * k + 1
        self.edg_dims = edg_dims
        self.voxel_size = edg_dims.spacing / self.ratio
        self.dims = GridDims(*((n - 1) * self.ratio + 1 for n in edg_dims.shape),
                             origin=edg_dims.origin, spacing=self.voxel_size)
        self.truncation = TRUNCATION_VOXELS * self.voxel_size if truncation is None else truncation
        self.w_max = w_max
        # one row per node copy, one column per voxel of its block
        self.tsdf = np.ones((0, self.ratio**3))
        self.weight = np.zeros((0, self.ratio**3))
        self._build_tables()
        self._cache_version = None

    # -- static layout -------------------------------------------------------
    def _build_tables(self) -> None:
        k, b = self.k, self.ratio
        n = b + 1  # voxels per EDG cell edge
        local = np.stack(np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij"), -1)
        bits = (local > k).astype(np.int64)
        self.cell_voxel_corner = bits[..., 0] + 2 * bits[..., 1] + 4 * bits[..., 2]
        j = local - bits * b + k
        self.cell_voxel_block = np.ravel_multi_index((j[..., 0], j[..., 1], j[..., 2]), (b, b, b))
        self.cell_voxel_local = local
        # block offsets relative to the owning node, per flat block index
        jj = np.stack(np.unravel_index(np.arange(b**3), (b, b, b)), -1)
        self.block_offsets = jj - k
        # corner roles compatible with each block position, in preference order
        compat = np.ones((b**3, 8), dtype=bool)
        for c in range(8):
            for axis in range(3):
                if CORNER_OFFSETS[c, axis]:
                    compat[:, c] &= self.block_offsets[:, axis] <= 0
                else:
                    compat[:, c] &= self.block_offsets[:, axis] >= 0
        self.block_corner_compat = compat

    def ensure_capacity(self, n_nodes: int) -> None:
        have = len(self.tsdf)
        if n_nodes <= have:
            return
        cols = self.ratio**3
        pad = max(n_nodes, 2 * have) - have
        self.tsdf = np.concatenate([self.tsdf, np.ones((pad, cols))])
        self.weight = np.concatenate([self.weight, np.zeros((pad, cols))])

    # -- voxel bookkeeping -------------------------------------------------------
    def used_mask(self, graph: DeformGraph) -> np.ndarray:
        """``mask[n, j]``: block voxel ``j`` of node ``n`` lies in an active cell."""
        table = graph.node_cell_table()
        has = table >= 0
        return (has[:, None, :] & self.block_corner_compat[None, :, :]).any(axis=2)

    def voxel_cells(self, graph: DeformGraph, nodes: np.ndarray, blocks: np.ndarray) -> np.ndarray:
        """An active EDG cell containing each voxel copy (for warping)."""
        table = graph.node_cell_table()
        cells = np.full(len(nodes), -1, dtype=np.int64)
        for c in range(8):
            pick = (cells < 0) & self.block_corner_compat[blocks, c]
            cells[pick] = table[nodes[pick], c]
        return cells

    def voxel_positions(self, graph: DeformGraph, nodes: np.ndarray, blocks: np.ndarray) -> np.ndarray:
        return graph.dims.position(graph.coords[nodes]) + self.block_offsets[blocks] * self.voxel_size

    def voxel_coords(self, graph: DeformGraph, nodes: np.ndarray, blocks: np.ndarray) -> np.ndarray:
        return graph.coords[nodes] * self.ratio + self.block_offsets[blocks]

    def active_voxels(self, graph: DeformGraph):
        """``(nodes, blocks)`` of every voxel copy inside an active cell."""
        self.ensure_capacity(graph.n_nodes)
        mask = self.used_mask(graph)
        nodes, blocks = np.nonzero(mask)
        return nodes, blocks

    def cell_voxel_ids(self, graph: DeformGraph, cells: np.ndarray):
        """Owning node and block index for all ``(2k+2)^3`` voxels of each cell."""
        cells = np.asarray(cells, dtype=np.int64)
        corners = self.cell_voxel_corner.ravel()
        nodes = graph.cell_nodes[cells][:, corners]
        blocks = np.broadcast_to(self.cell_voxel_block.ravel(), nodes.shape)
        shape = (len(cells),) + self.cell_voxel_corner.shape
        return nodes.reshape(shape), np.array(blocks).reshape(shape)

    def cell_structure(self, graph: DeformGraph, cell: int) -> dict:
        nodes, blocks = self.cell_voxel_ids(graph, [cell])
        ids = set(zip(nodes.ravel().tolist(), blocks.ravel().tolist()))
        per_node: dict[int, int] = {}
        for n, _ in ids:
            per_node[n] = per_node.get(n, 0) + 1
        n_edge = self.ratio + 1
        return {
            "tsdf_cells": (n_edge - 1) ** 3,
            "voxels": len(ids),
            "voxels_per_node": sorted(per_node.values()),
        }

    def lfb_corner(self, blocks: np.ndarray) -> np.ndarray:
        """Corner role under which a block voxel is the left-front-bottom voxel
        of a TSDF cell inside the EDG cell."""
        o = self.block_offsets[blocks]
        bits = (o < 0).astype(np.int64)
        return bits[..., 0] + 2 * bits[..., 1] + 4 * bits[..., 2]

    def voxel_buckets(self, graph: DeformGraph) -> BucketGrid:
        """Voxel copies as a bucket grid keyed by voxel linear index."""
        nodes, blocks = self.active_voxels(graph)
        coords = self.voxel_coords(graph, nodes, blocks)
        index = coords[:, 0] + self.dims.nx * (coords[:, 1] + self.dims.ny * coords[:, 2])
        order = np.lexsort((blocks, nodes, index))
        grid: BucketGrid = BucketGrid(self.dims)
        refs = {}
        for i in order:
            key = (int(nodes[i]), int(blocks[i]))
            refs[key] = grid.insert(int(index[i]), key)  # placeholder, replaced below
        table = graph.node_cell_table()
        corners = self.lfb_corner(blocks)
        for i in order:
            n, j = int(nodes[i]), int(blocks[i])
            offsets = (-1,) * 8
            c = int(corners[i])
            cid = table[n, c]
            if cid >= 0:
                base = self.block_offsets[j] + CORNER_OFFSETS[c] * self.ratio
                vn, vb = self.cell_voxel_ids(graph, [cid])
                offs = []
                for q in base + CORNER_OFFSETS:
                    key = (int(vn[0][tuple(q)]), int(vb[0][tuple(q)]))
                    offs.append(refs[key].bucket_offset if key in refs else -1)
                offsets = tuple(offs)
            ref = refs[(n, j)]
            grid.set(ref, Voxel(
                tsdf=float(self.tsdf[n, j]),
                weight=float(self.weight[n, j]),
                node_assoc=graph.node_ref(n),
                is_real=bool(graph.is_real[n]),
                parent_id=int(graph.parent_ids[n]),
                self_ref=ref,
                cell_voxel_offsets=offsets,
            ))
        return grid

    # -- snapshot ---------------------------------------------------------------
    def export_snapshot(self, graph: DeformGraph, path) -> int:
        """Binary dump of every active voxel copy; returns the record count."""
        grid = self.voxel_buckets(graph)
        records = []
        for ref, vox in grid.items():
            coord = np.unravel_index(ref.index1d, self.dims.shape, order="F")
            records.append(SNAPSHOT_RECORD.pack(int(coord[0]), int(coord[1]), int(coord[2]),
                                                vox.tsdf, vox.weight, ref.index1d,
                                                ref.bucket_offset, int(vox.is_real)))
        header = SNAPSHOT_MAGIC + struct.pack("<If", len(records), self.voxel_size)
        Path(path).write_bytes(header + b"".join(records))
        return len(records)


def read_snapshot(path) -> tuple[float, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != SNAPSHOT_MAGIC:
        raise ValueError("not a TSDF snapshot")
    count, voxel_size = struct.unpack_from("<If", data, 8)
    dtype = np.dtype([("x", "<i4"), ("y", "<i4"), ("z", "<i4"), ("tsdf", "<f4"), ("weight", "<f4"),
                      ("index1d", "<u4"), ("copy", "u1"), ("real", "u1")])
    if len(data) != 16 + count * dtype.itemsize:
        raise ValueError("truncated TSDF snapshot")
    return voxel_size, np.frombuffer(data, dtype=dtype, offset=16, count=count)


# -- connectivity propagation ---------------------------------------------------

def _cube_lattice_edges(n: int):
    """All axis-aligned neighbour pairs in an ``n^3`` block of local voxels."""
    idx = np.arange(n**3).reshape(n, n, n)
    pairs = [
        np.stack([idx[:-1, :, :].ravel(), idx[1:, :, :].ravel()], 1),
        np.stack([idx[:, :-1, :].ravel(), idx[:, 1:, :].ravel()], 1),
        np.stack([idx[:, :, :-1].ravel(), idx[:, :, 1:].ravel()], 1),
    ]
    return np.concatenate(pairs)


def propagate_connectivity(volume: TsdfVolume, record: DuplicationRecord,
                           graph: DeformGraph) -> TsdfDuplication:
    """Carry an applied EDG duplication over to the voxel grid.

    Voxel copies follow their owning node copies, so the committed EDG update
    already fixes which voxel copies each duplicated TSDF cell uses.  This
    allocates voxel blocks for the new virtual nodes and reports the per-cell
    voxel labelling and the TSDF cutting edges.
    """
    if not record.applied:
        raise ValueError("restore_connectivity must run before propagation")
    volume.ensure_capacity(graph.n_nodes)
    for nid in record.new_nodes:
        volume.tsdf[nid] = 1.0
        volume.weight[nid] = 0.0
    out = TsdfDuplication()
    n = volume.ratio + 1
    edges = _cube_lattice_edges(n)
    local = volume.cell_voxel_local.reshape(-1, 3)
    for src in record.duplicated_sources:
        labels = record.source_labels[src][volume.cell_voxel_corner]
        out.voxel_labels[src] = labels
        flat = labels.ravel()
        cut = edges[flat[edges[:, 0]] != flat[edges[:, 1]]]
        out.cutting_edges[src] = [(tuple(local[a]), tuple(local[b])) for a, b in cut]
        out.tsdf_cell_copies[src] = (n - 1) ** 3 * len(record.dups_of(src))
    return out


def assign_virtual_tsdf(volume: TsdfVolume, record: DuplicationRecord, graph: DeformGraph) -> None:
    """Give the virtual voxels of duplicated cells their initial signed distances.

    Real voxels are never touched.  A virtual voxel next to a real voxel with a
    negative value receives the negated value (smallest magnitude wins); every
    other virtual voxel is set to +1.
    """
    fresh = set(record.new_nodes)
    n = volume.ratio + 1
    edges = _cube_lattice_edges(n)
    proposals: dict[tuple[int, int], float] = {}
    for src in record.duplicated_sources:
        for d in record.dups_of(src):
            corner_real = d.corner_labels == d.label
            nodes, blocks = volume.cell_voxel_ids(graph, [d.cell_id])
            nodes = nodes.ravel()
            blocks = blocks.ravel()
            real = corner_real[volume.cell_voxel_corner.ravel()]
            vals = volume.tsdf[nodes, blocks]
            wts = volume.weight[nodes, blocks]
            for i in np.flatnonzero(~real):
                key = (int(nodes[i]), int(blocks[i]))
                if key[0] not in fresh and wts[i] > 0:
                    continue  # an earlier virtual copy that already carries data
                proposals.setdefault(key, 1.0)
            for a, b in edges:
                for v, r in ((a, b), (b, a)):
                    if not real[v] and real[r] and wts[r] > 0 and vals[r] < 0:
                        key = (int(nodes[v]), int(blocks[v]))
                        if key in proposals:
                            proposals[key] = min(proposals[key], -vals[r])
    for (node, block), value in proposals.items():
        volume.tsdf[node, block] = value
        volume.weight[node, block] = VIRTUAL_BOOTSTRAP_WEIGHT


# -- fusion -----------------------------------------------------------------------

def sample_depth(frame: DepthFrame, points: np.ndarray, max_step: float):
    """Depth under each camera-space point, bilinear where the 2x2 patch is
    valid and continuous (spread below ``max_step``), nearest pixel otherwise."""
    z = points[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uf = frame.fx * points[:, 0] / z + frame.cx
        vf = frame.fy * points[:, 1] / z + frame.cy
    h, w = frame.height, frame.width
    ok = (z > 0) & np.isfinite(uf) & np.isfinite(vf)
    ok &= (uf > -0.5) & (uf < w - 0.5) & (vf > -0.5) & (vf < h - 0.5)
    uf = np.where(ok, uf, 0.0)
    vf = np.where(ok, vf, 0.0)
    un = np.clip(np.round(uf), 0, w - 1).astype(np.int64)
    vn = np.clip(np.round(vf), 0, h - 1).astype(np.int64)
    depth = frame.depth[vn, un]
    u0 = np.clip(np.floor(uf), 0, w - 2).astype(np.int64)
    v0 = np.clip(np.floor(vf), 0, h - 2).astype(np.int64)
    au = np.clip(uf - u0, 0.0, 1.0)
    av = np.clip(vf - v0, 0.0, 1.0)
    d00 = frame.depth[v0, u0]
    d01 = frame.depth[v0, u0 + 1]
    d10 = frame.depth[v0 + 1, u0]
    d11 = frame.depth[v0 + 1, u0 + 1]
    patch = np.stack([d00, d01, d10, d11])
    smooth = np.all(patch > 0, axis=0) & (patch.max(axis=0) - patch.min(axis=0) < max_step)
    bil = (1 - av) * ((1 - au) * d00 + au * d01) + av * ((1 - au) * d10 + au * d11)
    depth = np.where(smooth, bil, depth)
    ok &= depth > 0
    return np.where(ok, depth, 0.0), ok


def fuse_depth(volume: TsdfVolume, frame: DepthFrame, graph: DeformGraph, pose: GlobalPose,
               w_new: float = W_NEW) -> int:
    """Fuse one depth frame into the canonical volume; returns #updated voxels."""
    nodes, blocks = volume.active_voxels(graph)
    if len(nodes) == 0:
        return 0
    pos = volume.voxel_positions(graph, nodes, blocks)
    cells = volume.voxel_cells(graph, nodes, blocks)
    live = warp_points(pos, cells, graph, pose)
    depth, ok = sample_depth(frame, live, max_step=volume.truncation)
    sdf = (depth - live[:, 2]) / volume.truncation
    ok &= sdf > -1.0
    # virtual voxels pad a cut and hold no material: a surface in front of one
    # belongs to another component, so only free-space evidence is fused there
    ok &= (sdf >= 0) | graph.is_real[nodes]
    # point-to-plane distance along the observed normal where one exists, so
    # oblique views do not inflate the distance
    u, v, _ = frame.project(live)
    n = frame.normals()[v, u]
    r = np.linalg.norm(live, axis=1)
    cos = -np.sum(n * live, axis=1) / np.where(r > 0, r, 1.0)
    has = np.linalg.norm(n, axis=1) > 0.5
    # pixels without a normal sit on depth edges, where rays graze the surface
    ok &= has & (cos >= MIN_COS)
    scale = np.where(has, np.clip(cos, MIN_COS, 1.0) * r / np.where(live[:, 2] > 0, live[:, 2], 1.0), 1.0)
    psi = np.minimum(sdf[ok] * scale[ok], 1.0)
    # oblique observations count less
    wn = w_new * np.where(has, np.clip(cos, MIN_COS, 1.0), 1.0)[ok]
    idx = (nodes[ok], blocks[ok])
    w = volume.weight[idx]
    volume.tsdf[idx] = (w * volume.tsdf[idx] + wn * psi) / (w + wn)
    volume.weight[idx] = np.minimum(w + wn, volume.w_max)
    return int(ok.sum())


def activate_newly_observed(volume: TsdfVolume, frame: DepthFrame, graph: DeformGraph,
                            pose: GlobalPose, stride: int = 1, anchors=None,
                            with_displacement: bool = False):
    """EDG cells around observed depth that are not active yet.

    Observed points are pulled back to canonical space with the inverse global
    pose and an offset from a nearby anchor. Anchors are surface points given
    as ``(canonical, live, live_normals)``; the nearest of the closest few whose
    normal agrees with the observed one is used. Points without such an anchor
    use the displacement of the nearest warped real node. Only pixels with a
    normal are used, as in fusion. Every cell within the truncation band of a
    pulled-back point is returned, sorted by (z, y, x). With
    ``with_displacement`` the mean displacement of the points that activated
    each cell is returned as a second, aligned array.
    """
    sel = (slice(None, None, stride), slice(None, None, stride))
    nrm = frame.normals()[sel]
    # same pixels as fusion: depth edges carry no normal and are skipped
    valid = frame.valid[sel] & (np.linalg.norm(nrm, axis=-1) > 0.5)
    pts = frame.backproject()[sel][valid]
    if len(pts) == 0:
        return ([], np.zeros((0, 3))) if with_displacement else []
    nrm = nrm[valid]
    canon = (pts - pose.t) @ pose.R
    done = np.zeros(len(pts), dtype=bool)
    if anchors is not None and len(anchors[0]):
        a_canon, a_live, a_nrm = anchors
        k = min(ANCHOR_NEIGHBOURS, len(a_live))
        _, nn = cKDTree(a_live).query(pts, k=k)
        nn = nn.reshape(len(pts), k)
        agree = np.einsum("pkj,pj->pk", a_nrm[nn], nrm) > ANCHOR_MIN_COS
        first = np.argmax(agree, axis=1)
        done = agree[np.arange(len(pts)), first]
        pick = nn[np.arange(len(pts)), first][done]
        canon[done] = a_canon[pick] + (pts[done] - a_live[pick]) @ pose.R
    active = np.flatnonzero(graph.node_active() & graph.is_real)
    rest = ~done
    if len(active) and np.any(rest):
        live_nodes = pose.apply(graph.positions[active] + graph.t[active])
        _, nn = cKDTree(live_nodes).query(pts[rest])
        canon[rest] = canon[rest] - graph.t[active[nn]]
    band = volume.truncation
    offs = np.array([[a, b, c] for a in (-band, 0, band) for b in (-band, 0, band) for c in (-band, 0, band)])
    dims = graph.dims
    disp = (pts - pose.t) @ pose.R - canon
    cells = np.floor((canon[:, None, :] + offs[None] - np.asarray(dims.origin)) / dims.spacing).astype(np.int64)
    cells = cells.reshape(-1, 3)
    disp = np.repeat(disp, len(offs), axis=0)
    limit = np.array(dims.shape) - 1
    inside = np.all((cells >= 0) & (cells < limit), axis=1)
    cells, disp = cells[inside], disp[inside]
    if len(cells) == 0:
        return ([], np.zeros((0, 3))) if with_displacement else []
    # unique cells in (z, y, x) order
    index = cells[:, 0] + dims.nx * (cells[:, 1] + dims.ny * cells[:, 2])
    uniq, first, inv = np.unique(index, return_index=True, return_inverse=True)
    total = np.zeros((len(uniq), 3))
    np.add.at(total, inv, disp)
    mean = total / np.bincount(inv, minlength=len(uniq))[:, None]
    fresh = np.array([not graph._cells_at.get(int(i)) for i in uniq], dtype=bool)
    out = [tuple(int(v) for v in c) for c in cells[first[fresh]]]
    if with_displacement:
        return out, mean[fresh]
    return out
