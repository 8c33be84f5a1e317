"""Analytic synthetic scenes rendered by exact ray casting.

Every scene is a union of convex primitives whose poses depend on the frame
index.  World coordinates coincide with the camera frame of frame 0, which is
also the canonical space of the reconstruction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ..tsdf_volume import DepthFrame
from ..warp_field import GlobalPose

SCENES = (
    "sphere",
    "noisy_sphere",
    "rigid_sphere",
    "splitting_cylinder",
    "tearing_sheet",
    "tearing_sheet_cross",
    "contact",
)


# -- primitives --------------------------------------------------------------
#
# Each convex primitive reports the ray parameter interval ``[t_in, t_out]``
# inside it (empty when ``t_in > t_out``); intersections of convex sets are
# the intersection of their intervals.

EMPTY = (np.inf, -np.inf)


def _patch(fn, ns: int, nt: int):
    """Triangulated grid over a parametric patch ``fn(s, t)``, s, t in [0, 1]."""
    s, t = np.meshgrid(np.linspace(0, 1, ns + 1), np.linspace(0, 1, nt + 1), indexing="ij")
    pts = fn(s, t).reshape(-1, 3)
    q = (np.arange(ns)[:, None] * (nt + 1) + np.arange(nt)[None, :]).ravel()
    faces = np.concatenate([np.stack([q, q + nt + 1, q + nt + 2], 1), np.stack([q, q + nt + 2, q + 1], 1)])
    return pts, faces


def _merge(parts):
    verts, faces, base = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + base)
        base += len(v)
    return np.vstack(verts), np.vstack(faces).astype(np.int64)


class Primitive:
    def interval(self, o: np.ndarray, d: np.ndarray):
        raise NotImplementedError

    def intersect(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Ray parameter of the first surface hit in front of the origin (inf if none)."""
        tn, tf = self.interval(o, d)
        hit = (tn <= tf) & (tf > 0)
        t = np.where(tn > 0, tn, tf)
        return np.where(hit, t, np.inf)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def moved(self, R: np.ndarray, t: np.ndarray) -> "Primitive":
        raise NotImplementedError


def _quadric_interval(A, B, C):
    """Interval where ``A t^2 + 2 B t + C <= 0`` for ``A >= 0``."""
    disc = B * B - A * C
    ok = (disc >= 0) & (A > 1e-18)
    s = np.sqrt(np.where(ok, disc, 0.0))
    As = np.where(A > 1e-18, A, 1.0)
    tn = np.where(ok, (-B - s) / As, np.inf)
    tf = np.where(ok, (-B + s) / As, -np.inf)
    # ray parallel to the quadric axis: all or nothing
    par = A <= 1e-18
    tn = np.where(par, np.where(C <= 0, -np.inf, np.inf), tn)
    tf = np.where(par, np.where(C <= 0, np.inf, -np.inf), tf)
    return tn, tf


def _slab_interval(po, pd, lo, hi):
    """Interval where ``lo <= po + t pd <= hi``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - po) / pd
        t2 = (hi - po) / pd
    par = pd == 0
    inside = (po >= lo) & (po <= hi)
    tn = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    tf = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    return tn, tf


@dataclass
class Sphere(Primitive):
    center: np.ndarray
    radius: float

    def interval(self, o, d):
        oc = o - self.center
        return _quadric_interval(np.sum(d * d, -1), np.sum(oc * d, -1), np.sum(oc * oc, -1) - self.radius**2)

    def mesh(self, n_lat: int = 96, n_lon: int = 192):
        def fn(s, t):
            th, ph = np.pi * s, 2 * np.pi * t
            return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], -1) * self.radius + self.center
        return _patch(fn, n_lat, n_lon)

    def moved(self, R, t):
        return Sphere(R @ self.center + t, self.radius)

    @property
    def anchor(self) -> np.ndarray:
        return self.center


@dataclass
class Cylinder(Primitive):
    """Capped cylinder between points ``a`` and ``b``; optionally only the half
    on the non-positive side of ``clip`` (a direction normal to the axis)."""
    a: np.ndarray
    b: np.ndarray
    radius: float
    clip: np.ndarray | None = None

    def _frame(self):
        axis = self.b - self.a
        length = float(np.linalg.norm(axis))
        w = axis / length
        if self.clip is not None:
            u = -np.asarray(self.clip, float)
            u = u - (u @ w) * w
            u /= np.linalg.norm(u)
        else:
            u = np.cross(w, [1.0, 0, 0] if abs(w[0]) < 0.9 else [0, 1.0, 0])
            u /= np.linalg.norm(u)
        return w, u, np.cross(w, u), length

    def interval(self, o, d):
        w, _, _, length = self._frame()
        oa = o - self.a
        dw, ow = d @ w, oa @ w
        dp, op = d - dw[..., None] * w, oa - ow[..., None] * w
        tn, tf = _quadric_interval(np.sum(dp * dp, -1), np.sum(dp * op, -1), np.sum(op * op, -1) - self.radius**2)
        sn, sf = _slab_interval(ow, dw, 0.0, length)
        tn, tf = np.maximum(tn, sn), np.minimum(tf, sf)
        if self.clip is not None:
            c = np.asarray(self.clip, float)
            hn, hf = _slab_interval(oa @ c, d @ c, -np.inf, 0.0)
            tn, tf = np.maximum(tn, hn), np.minimum(tf, hf)
        return tn, tf

    def mesh(self, n_around: int = 192, n_along: int = 96, n_rings: int = 24):
        w, u, v, length = self._frame()
        r = self.radius
        # angles measured from u; the clipped half keeps |angle| <= 90 degrees
        lo, span = (-np.pi / 2, np.pi) if self.clip is not None else (0.0, 2 * np.pi)
        n_ang = n_around // 2 if self.clip is not None else n_around

        def ring(ang, rad):
            return np.cos(ang)[..., None] * u * rad[..., None] + np.sin(ang)[..., None] * v * rad[..., None]

        parts = [_patch(lambda s, t: self.a + (s * length)[..., None] * w + ring(lo + span * t, r + 0 * s),
                        n_along, n_ang)]
        for end in (self.a, self.b):
            parts.append(_patch(lambda s, t: end + ring(lo + span * t, r * s), n_rings, n_ang))
        if self.clip is not None:
            parts.append(_patch(lambda s, t: self.a + (s * length)[..., None] * w
                                + ((2 * t - 1) * r)[..., None] * v, n_along, n_rings))
        return _merge(parts)

    def moved(self, R, t):
        clip = None if self.clip is None else R @ self.clip
        return Cylinder(R @ self.a + t, R @ self.b + t, self.radius, clip)

    @property
    def anchor(self) -> np.ndarray:
        return self.a


@dataclass
class Box(Primitive):
    center: np.ndarray
    half: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))

    def interval(self, o, d):
        ol = (o - self.center) @ self.R
        dl = d @ self.R
        tn, tf = np.full(ol.shape[:-1], -np.inf), np.full(ol.shape[:-1], np.inf)
        for k in range(3):
            a, b = _slab_interval(ol[..., k], dl[..., k], -self.half[k], self.half[k])
            tn, tf = np.maximum(tn, a), np.minimum(tf, b)
        return tn, tf

    def mesh(self, n: int = 32):
        parts = []
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            for sign in (-1.0, 1.0):
                def fn(s, t, axis=axis, a=a, b=b, sign=sign):
                    p = np.zeros(s.shape + (3,))
                    p[..., axis] = sign
                    p[..., a] = 2 * s - 1
                    p[..., b] = 2 * t - 1
                    return (p * self.half) @ self.R.T + self.center
                parts.append(_patch(fn, n, n))
        return _merge(parts)

    def moved(self, R, t):
        return Box(R @ self.center + t, self.half.copy(), R @ self.R)

    @property
    def anchor(self) -> np.ndarray:
        return self.center


# -- scenes -------------------------------------------------------------------

@dataclass
class SceneSpec:
    name: str
    n_frames: int = 20
    width: int = 160
    height: int = 120
    fx: float = 160.0
    fy: float = 160.0
    cx: float | None = None
    cy: float | None = None
    noise_sigma: float = 0.0
    seed: int = 0
    voxel: float = 0.004

    def __post_init__(self):
        if self.name not in SCENES:
            raise ValueError(f"unknown scene {self.name!r}; choose from {', '.join(SCENES)}")
        if self.cx is None:
            self.cx = (self.width - 1) / 2.0
        if self.cy is None:
            self.cy = (self.height - 1) / 2.0


@dataclass
class CutPlane:
    point: np.ndarray
    normal: np.ndarray


@dataclass
class SceneFrame:
    frame: DepthFrame
    gt_vertices: np.ndarray
    gt_triangles: np.ndarray
    cuts: list
    gt_components: int
    # matched (canonical point, live point) pairs standing in for feature matches
    sparse_canonical: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sparse_live: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


DEPTH = 0.35


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def _scene_objects(spec: SceneSpec, f: int):
    """Primitives at frame ``f`` (world coordinates), cut planes, and camera pose."""
    c = np.array([0.0, 0.0, DEPTH])
    vox = spec.voxel
    cam = GlobalPose.identity()
    cuts = []
    name = spec.name
    if name in ("sphere", "noisy_sphere"):
        prims = [Sphere(c, 10 * vox)]
        if name == "sphere":
            cam = _orbit_pose(f, spec.n_frames, c)
    elif name == "rigid_sphere":
        off = np.array([0.0015, -0.001, 0.001]) * f
        prims = [Sphere(c + off, 10 * vox)]
    elif name == "splitting_cylinder":
        # upright cylinder cut through its axis; the halves pull apart sideways
        # and in depth (motion tangential to the surface is unobservable for
        # point-to-plane data, so the split has a depth component)
        half_len, radius = 0.05, 0.025
        s = 0.0015 * max(0, f - 2)
        bottom, top = c + [0, half_len, 0], c - [0, half_len, 0]
        x = np.array([1.0, 0.0, 0.0])
        d = _unit([1.0, 0.0, -1.0])
        left = Cylinder(bottom, top, radius, clip=x).moved(np.eye(3), -s * d)
        right = Cylinder(bottom, top, radius, clip=-x).moved(np.eye(3), s * d)
        prims = [left, right]
        cuts = [CutPlane(c.copy(), x.copy())]
    elif name in ("tearing_sheet", "tearing_sheet_cross"):
        half = np.array([0.05, 0.04, 1.5 * vox])
        s = 0.0015 * max(0, f - 2)
        if name == "tearing_sheet":
            h = half * [0.5, 1, 1]
            prims = [Box(c + [-h[0], 0, 0] + s * _unit([-1, 0, 1]), h),
                     Box(c + [h[0], 0, 0] + s * _unit([1, 0, -1]), h)]
            cuts = [CutPlane(c.copy(), np.array([1.0, 0.0, 0.0]))]
        else:
            h = half * [0.5, 0.5, 1]
            prims = []
            for sx in (-1, 1):
                for sy in (-1, 1):
                    dz = 1.0 if sx * sy > 0 else -1.0
                    prims.append(Box(c + [sx * h[0], sy * h[1], 0] + s * _unit([sx, sy, dz]), h))
            cuts = [CutPlane(c.copy(), np.array([1.0, 0.0, 0.0])), CutPlane(c.copy(), np.array([0.0, 1.0, 0.0]))]
    elif name == "contact":
        # two objects that start more than two EDG cells apart and close the gap
        gap = max(0.0, 0.05 - 0.003 * f)
        r = 8 * vox
        prims = [Sphere(c + [-(r + gap / 2), 0, 0], r),
                 Box(c + [r + gap / 2, 0, 0], np.array([r, r, r]))]
    return prims, cuts, cam


def _orbit_pose(f: int, n: int, target: np.ndarray) -> GlobalPose:
    """World-to-camera pose of the ``f``-th of ``n`` viewpoints around ``target``.

    Viewpoints are spread over the sphere (Fibonacci lattice) and visited in
    greedy nearest-neighbour order starting from the frame-0 camera, which is
    the identity pose.
    """
    dirs = _orbit_directions(n)
    d = dirs[f]
    dist = float(np.linalg.norm(target))
    z = -d
    ref = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    y = ref - (ref @ z) * z
    y /= np.linalg.norm(y)
    x = np.cross(y, z)
    R = np.stack([x, y, z])
    if f == 0:
        return GlobalPose.identity()
    cam = target + dist * d
    return GlobalPose(R, -R @ cam)


def _orbit_directions(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    golden = np.pi * (3.0 - np.sqrt(5.0))
    zc = 1 - 2 * i / n
    r = np.sqrt(1 - zc**2)
    pts = np.stack([r * np.cos(golden * i), r * np.sin(golden * i), zc], -1)
    # rotate so that the first viewpoint looks along +z from the origin side
    start = np.array([0.0, 0.0, -1.0])
    rot, _ = Rotation.align_vectors([start], [pts[0]])
    pts = rot.apply(pts)
    order = [0]
    left = set(range(1, n))
    while left:
        cur = pts[order[-1]]
        nxt = max(sorted(left), key=lambda j: pts[j] @ cur)
        order.append(nxt)
        left.remove(nxt)
    return pts[order]


def render_depth(prims, cam: GlobalPose, spec: SceneSpec, with_ids: bool = False):
    v, u = np.mgrid[0 : spec.height, 0 : spec.width]
    d_cam = np.stack([(u - spec.cx) / spec.fx, (v - spec.cy) / spec.fy, np.ones(u.shape)], -1)
    inv = cam.inverse()
    o = np.broadcast_to(inv.t, d_cam.shape)
    d = d_cam @ inv.R.T
    t = np.full(u.shape, np.inf)
    ids = np.full(u.shape, -1)
    for k, p in enumerate(prims):
        tk = p.intersect(o, d)
        ids = np.where(tk < t, k, ids)
        t = np.minimum(t, tk)
    # ray parameter equals camera-space depth because d_cam has unit z
    depth = np.where(np.isfinite(t), t, 0.0)
    return (depth, ids) if with_ids else depth


def sparse_pairs(spec: SceneSpec, f: int, stride: int = 8, visible_tol: float = 1e-3):
    """Surface points seen in frame 0 and their true positions in frame ``f``.

    Points are sampled on a pixel grid of frame 0 and kept when they are
    visible (not occluded) in frame ``f``.
    """
    prims0, _, cam0 = _scene_objects(spec, 0)
    prims_f, _, cam_f = _scene_objects(spec, f)
    depth0, ids = render_depth(prims0, cam0, spec, with_ids=True)
    frame0 = DepthFrame(depth0, spec.fx, spec.fy, spec.cx, spec.cy)
    mask = np.zeros(depth0.shape, dtype=bool)
    mask[stride // 2 :: stride, stride // 2 :: stride] = True
    mask &= depth0 > 0
    canon = cam0.inverse().apply(frame0.backproject()[mask])
    shift = np.array([pf.anchor - p0.anchor for p0, pf in zip(prims0, prims_f)])
    live = cam_f.apply(canon + shift[ids[mask]])
    depth_f = render_depth(prims_f, cam_f, spec)
    fr = DepthFrame(depth_f, spec.fx, spec.fy, spec.cx, spec.cy)
    u, v, ok = fr.project(live)
    ok &= np.abs(depth_f[v, u] - live[:, 2]) < visible_tol
    return canon[ok], live[ok]


def synth_scene(spec: SceneSpec, f: int) -> SceneFrame:
    if f < 0 or f >= spec.n_frames:
        raise ValueError(f"frame {f} outside 0..{spec.n_frames - 1}")
    prims, cuts, cam = _scene_objects(spec, f)
    depth = render_depth(prims, cam, spec)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, f])
        noise = rng.normal(0.0, spec.noise_sigma, depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-6), 0.0)
    frame = DepthFrame(depth, spec.fx, spec.fy, spec.cx, spec.cy, camera_pose=cam)
    verts, faces = [], []
    for p in prims:
        pv, pf = p.mesh()
        faces.append(pf + sum(len(x) for x in verts))
        verts.append(cam.apply(pv))
    n_comp = _count_components(prims)
    sc, sl = sparse_pairs(spec, f)
    return SceneFrame(frame, np.vstack(verts), np.vstack(faces), cuts, n_comp, sc, sl)


def _count_components(prims) -> int:
    """Objects that touch count as one component (closed-form for our primitives)."""
    n = len(prims)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if _touch(prims[i], prims[j]):
                parent[find(i)] = find(j)
    return len({find(i) for i in range(n)})


def _touch(a, b, tol: float = 1e-9) -> bool:
    # sampled surface points of one inside/on the other (sufficient for our scenes)
    va, _ = a.mesh()
    vb, _ = b.mesh()
    return bool(cKDTree(va).query(vb, distance_upper_bound=1e-6 + tol)[0].min() < np.inf)


def scene_bounds(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Canonical bounding box of the frame-0 geometry."""
    prims, _, _ = _scene_objects(spec, 0)
    pts = np.vstack([p.mesh()[0] for p in prims])
    return pts.min(axis=0), pts.max(axis=0)
