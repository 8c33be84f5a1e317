"""Distance of reconstructed vertices to a ground-truth triangle mesh."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class MetricsEntry:
    frame: int
    mean_pct: float
    max_pct: float
    off_surface_count: int
    cutting_edges: int = 0


def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact distance from points to triangles (row-wise), via region tests."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe(num, den):
        return num / np.where(np.abs(den) > 1e-300, den, 1.0)

    denom = va + vb + vc
    v = safe(vb, denom)
    w = safe(vc, denom)
    closest = a + v[..., None] * ab + w[..., None] * ac  # interior
    # edges
    e_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    t = safe(d4 - d3, (d4 - d3) + (d5 - d6))
    closest = np.where(e_bc[..., None], b + t[..., None] * (c - b), closest)
    e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t = safe(d2, d2 - d6)
    closest = np.where(e_ac[..., None], a + t[..., None] * ac, closest)
    e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t = safe(d1, d1 - d3)
    closest = np.where(e_ab[..., None], a + t[..., None] * ab, closest)
    # vertices
    closest = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, closest)
    closest = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, closest)
    return np.linalg.norm(p - closest, axis=-1)


def surface_distances(points: np.ndarray, vertices: np.ndarray, triangles: np.ndarray,
                      candidates: int = 16) -> np.ndarray:
    """Nearest distance from each point to the mesh surface.

    Candidate triangles come from the nearest centroids; the result is exact
    whenever the true closest triangle is among them, which holds for the
    finely tessellated ground truth used here.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        return np.zeros(0)
    tri = vertices[triangles]
    k = min(candidates, len(tri))
    _, idx = cKDTree(tri.mean(axis=1)).query(points, k=k)
    idx = idx.reshape(len(points), k)
    t = tri[idx]
    d = point_triangle_distance(points[:, None, :], t[..., 0, :], t[..., 1, :], t[..., 2, :])
    return d.min(axis=1)


def evaluate(vertices: np.ndarray, gt_vertices: np.ndarray, gt_triangles: np.ndarray, cell_width: float,
             frame: int = 0, off_threshold_cells: float = 1.0, cutting_edges: int = 0) -> MetricsEntry:
    d = surface_distances(vertices, gt_vertices, gt_triangles)
    if len(d) == 0:
        return MetricsEntry(frame, float("nan"), float("nan"), 0, cutting_edges)
    pct = 100.0 * d / cell_width
    off = int(np.sum(d > off_threshold_cells * cell_width))
    return MetricsEntry(frame, float(pct.mean()), float(pct.max()), off, cutting_edges)


CSV_HEADER = "frame,mean_pct,max_pct,off_surface_count,cutting_edges"


def format_csv(entries: list[MetricsEntry]) -> str:
    rows = [CSV_HEADER]
    for e in entries:
        rows.append(f"{e.frame},{e.mean_pct:.6f},{e.max_pct:.6f},{e.off_surface_count},{e.cutting_edges}")
    return "\n".join(rows) + "\n"
