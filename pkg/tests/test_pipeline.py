import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image
from scipy.spatial.transform import Rotation

from topofusion.grid_core import GridDims
from topofusion.meshing import (StaleReferenceError, marching_cubes, mesh_connected_components, read_ply,
                                write_obj)
from topofusion.pipeline import cli
from topofusion.pipeline.config import ConfigError, Intrinsics, PipelineConfig
from topofusion.pipeline.io import FrameFormatError, RAW_HEADER, load_frame, write_png, write_raw
from topofusion.pipeline.metrics import CSV_HEADER, evaluate, format_csv, point_triangle_distance
from topofusion.pipeline.run import (FrameRecord, export_playback, playback_displacements,
                                     run_reconstruction, scene_source)
from topofusion.pipeline.scenes import DEPTH, SCENES, SceneSpec, synth_scene
from topofusion.tsdf_volume import TsdfVolume
from topofusion.warp_field import DeformGraph, GlobalPose, expand_graph

# -- config ------------------------------------------------------------------


def test_config_ratio_and_validation():
    for k in (1, 2, 3):
        c = PipelineConfig(k=k, voxel=0.004)
        assert c.edg_spacing == pytest.approx((2 * k + 1) * 0.004)
    with pytest.raises(ConfigError):
        PipelineConfig(k=4)
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"bogus": 1})


def test_config_precedence(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"k": 2, "frames": 7, "solver": {"w_reg": 0.5}}))
    c = PipelineConfig.load(path)
    assert c.k == 2 and c.frames == 7 and c.solver.w_reg == 0.5  # file over defaults
    assert c.voxel == PipelineConfig().voxel
    assert c.with_overrides(frames=3).frames == 3  # CLI over file
    assert c.with_overrides(frames=None).frames == 7
    with pytest.raises(ConfigError):
        (tmp_path / "bad.json").write_text("[1]")
        PipelineConfig.load(tmp_path / "bad.json")


# -- frame I/O ---------------------------------------------------------------

def test_png_millimetres(tmp_path):
    Image.fromarray(np.array([[1500, 0]], np.uint16)).save(tmp_path / "d.png")
    f = load_frame(tmp_path / "d.png", Intrinsics())
    assert f.depth[0, 0] == 1.5
    assert not f.valid[0, 1]


def test_raw_round_trip_and_errors(tmp_path):
    write_raw(tmp_path / "d.raw", np.array([[0.75, 0.0, 1.25]]))
    f = load_frame(tmp_path / "d.raw", Intrinsics())
    assert f.depth.tolist() == [[0.75, 0.0, 1.25]]
    (tmp_path / "bad.raw").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(FrameFormatError):
        load_frame(tmp_path / "bad.raw", Intrinsics())
    (tmp_path / "short.raw").write_bytes(RAW_HEADER.pack(b"DPTH", 4, 4) + bytes(8))
    with pytest.raises(FrameFormatError):
        load_frame(tmp_path / "short.raw", Intrinsics())
    with pytest.raises(FrameFormatError):
        load_frame(tmp_path / "d.raw", Intrinsics(), fmt="exr")


def test_png_writer_round_trip(tmp_path):
    d = np.array([[0.5, 0.0], [1.234, 2.0]])
    write_png(tmp_path / "d.png", d)
    assert np.array_equal(load_frame(tmp_path / "d.png", Intrinsics()).depth, d)


# -- metrics -----------------------------------------------------------------

def square(z=0.0, n=10):
    s = np.linspace(-0.05, 0.05, n + 1)
    x, y = np.meshgrid(s, s, indexing="ij")
    v = np.stack([x.ravel(), y.ravel(), np.full(x.size, z)], 1)
    q = (np.arange(n)[:, None] * (n + 1) + np.arange(n)).ravel()
    f = np.concatenate([np.stack([q, q + n + 1, q + n + 2], 1), np.stack([q, q + n + 2, q + 1], 1)])
    return v, f


def test_metrics_examples():
    v, f = square()
    cell = 0.004
    same = evaluate(v, v, f, cell)
    assert same.mean_pct == 0 and same.max_pct == 0 and same.off_surface_count == 0
    # interior vertices lifted by exactly one cell width
    inner = v[(np.abs(v[:, 0]) < 0.04) & (np.abs(v[:, 1]) < 0.04)] + [0, 0, cell]
    assert evaluate(inner, v, f, cell).mean_pct == pytest.approx(100.0)
    pts = np.vstack([v[:5], [[0.0, 0.0, 3 * cell]]])
    assert evaluate(pts, v, f, cell).off_surface_count == 1
    assert evaluate(pts, v, f, cell, off_threshold_cells=4).off_surface_count == 0


def test_metrics_csv():
    v, f = square()
    e = evaluate(v, v, f, 0.004, frame=2, cutting_edges=5)
    lines = format_csv([e]).splitlines()
    assert lines[0] == CSV_HEADER == "frame,mean_pct,max_pct,off_surface_count,cutting_edges"
    assert lines[1] == "2,0.000000,0.000000,0,5"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_point_triangle_distance_matches_sampling(seed):
    rng = np.random.default_rng(seed)
    a, b, c = rng.normal(size=(3, 3))
    p = rng.normal(size=3) * 2
    d = point_triangle_distance(p[None], a[None], b[None], c[None])[0]
    # oracle: dense barycentric sampling gives an upper bound within the sample spacing
    n = 300
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    m = i + j <= n
    u, w = i[m] / n, j[m] / n
    q = a + u[:, None] * (b - a) + w[:, None] * (c - a)
    brute = np.linalg.norm(q - p, axis=1).min()
    h = max(np.linalg.norm(b - a), np.linalg.norm(c - a)) / n
    assert d <= brute + 1e-12
    assert brute <= d + 2 * h


# -- scenes ------------------------------------------------------------------

def test_sphere_scene_is_analytic():
    spec = SceneSpec("sphere", n_frames=5)
    for f in (0, 3):
        sf = synth_scene(spec, f)
        frame = sf.frame
        pts = frame.backproject()[frame.valid]
        world = frame.camera_pose.inverse().apply(pts)
        r = np.linalg.norm(world - [0, 0, DEPTH], axis=1)
        assert len(pts) > 100
        assert np.abs(r - 10 * spec.voxel).max() < 1e-6


def test_scene_component_counts_and_cut_motion():
    spec = SceneSpec("splitting_cylinder", n_frames=40)
    assert synth_scene(spec, 0).gt_components == 1
    assert synth_scene(spec, 39).gt_components == 2
    # tearing sheet: the two halves separate linearly with the frame index
    sheet = SceneSpec("tearing_sheet", n_frames=12)
    gaps = []
    for f in range(3, 12):
        sf = synth_scene(sheet, f)
        v = sf.gt_vertices
        half = len(v) // 2
        gaps.append(v[half:, 0].min() - v[:half, 0].max())
    assert np.allclose(np.diff(gaps), np.diff(gaps)[0], rtol=1e-9)
    assert np.diff(gaps)[0] > 0


def test_scene_determinism_and_noise():
    spec = SceneSpec("noisy_sphere", n_frames=3, noise_sigma=0.002, seed=4)
    a, b = synth_scene(spec, 1), synth_scene(spec, 1)
    assert np.array_equal(a.frame.depth, b.frame.depth)
    clean = synth_scene(SceneSpec("noisy_sphere", n_frames=3), 1).frame.depth
    diff = (a.frame.depth - clean)[clean > 0]
    assert 0.0015 < diff.std() < 0.0025
    with pytest.raises(ValueError):
        SceneSpec("teapot")
    with pytest.raises(ValueError):
        synth_scene(spec, 3)
    assert len(SCENES) == 7


# -- frame loop ----------------------------------------------------------------

def test_single_sphere_frame():
    config = PipelineConfig(scene={"name": "sphere", "n_frames": 1})
    frames, dims, n = scene_source(config)
    result = run_reconstruction(config, frames, dims)
    assert n == 1 and result.updates == 0 and result.reports == []
    mesh = result.mesh
    assert mesh_connected_components(mesh)[0] == 1
    r = np.linalg.norm(mesh.vertices - [0, 0, DEPTH], axis=1)
    assert np.abs(r - 0.04).max() < 0.5 * config.voxel
    assert result.metrics[0].max_pct < 50


def sphere_mesh():
    g = DeformGraph(GridDims(7, 7, 7, origin=(-0.036, -0.036, -0.036), spacing=0.012))
    expand_graph(g, list(itertools.product(range(6), repeat=3)))
    vol = TsdfVolume(g.dims, 1)
    vol.ensure_capacity(g.n_nodes)
    nodes, blocks = vol.active_voxels(g)
    pos = vol.voxel_positions(g, nodes, blocks)
    vol.tsdf[nodes, blocks] = np.clip((np.linalg.norm(pos, axis=1) - 0.025) / vol.truncation, -1, 1)
    vol.weight[nodes, blocks] = 1.0
    return g, marching_cubes(vol, g)


def record(g, i, pose, t=None):
    t = np.zeros((g.n_nodes, 3)) if t is None else t
    return FrameRecord(i, pose, t, g.R.copy(), None, g.version, g.n_nodes)


def test_playback_identity_and_rigid(tmp_path):
    g, mesh = sphere_mesh()
    rigid = GlobalPose(Rotation.from_rotvec([0.3, -0.1, 0.2]).as_matrix(), np.array([0.01, 0.02, 0.3]))
    paths = export_playback(mesh, g, [record(g, 0, GlobalPose.identity()), record(g, 1, rigid)], tmp_path)
    assert [p.name for p in paths] == ["frame_0000.ply", "frame_0001.ply"]
    v0, f0, _ = read_ply(paths[0])
    v1, _, _ = read_ply(paths[1])
    assert np.allclose(v0, mesh.vertices, atol=1e-6) and np.array_equal(f0, mesh.triangles)
    assert np.allclose(v1, rigid.apply(mesh.vertices), atol=1e-6)


def test_playback_follows_provenance_and_rejects_orphans():
    g, _ = sphere_mesh()
    rec = record(g, 0, GlobalPose.identity(), t=np.arange(g.n_nodes * 3, dtype=float).reshape(-1, 3))
    assert np.array_equal(playback_displacements(g, rec), rec.t)
    short = FrameRecord(0, GlobalPose.identity(), rec.t[:8], g.R[:8], None, 0, 8)
    with pytest.raises(StaleReferenceError):
        # later nodes were created by expansion and have no ancestor among the first 8
        playback_displacements(g, short)


# -- CLI -----------------------------------------------------------------------

def write_config(tmp_path, **kw):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(kw))
    return str(path)


def test_cli_scene_mode(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["--config", write_config(tmp_path), "--scene", "rigid_sphere", "--frames", "2",
                     "--output", str(out), "--export-playback"])
    assert code == 0
    for name in ("canonical.obj", "canonical.ply", "live.obj", "live.ply", "metrics.csv", "topology.log"):
        assert (out / name).exists()
    assert len(list((out / "playback").glob("*.ply"))) == 2
    assert (out / "metrics.csv").read_text().splitlines()[0] == CSV_HEADER


def test_cli_input_mode_with_metrics(tmp_path):
    spec = SceneSpec("rigid_sphere", n_frames=2)
    (tmp_path / "frames").mkdir()
    (tmp_path / "gt").mkdir()
    for f in range(2):
        sf = synth_scene(spec, f)
        write_raw(tmp_path / "frames" / f"{f:03d}.raw", sf.frame.depth)
        write_obj(tmp_path / "gt" / f"{f:03d}.obj", sf.gt_vertices, sf.gt_triangles)
    out = tmp_path / "out"
    code = cli.main(["--config", write_config(tmp_path), "--input", str(tmp_path / "frames"),
                     "--metrics", str(tmp_path / "gt"), "--output", str(out), "--off-surface-cells", "2"])
    assert code == 0
    rows = (out / "metrics.csv").read_text().splitlines()
    assert len(rows) == 3
    assert float(rows[1].split(",")[2]) < 50  # max error of the first frame, % of a voxel


def test_cli_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "out")
    assert cli.main(["--config", str(tmp_path / "missing.json"), "--scene", "sphere", "--output", out]) == 2
    assert cli.main(["--config", write_config(tmp_path, k=9), "--scene", "sphere", "--output", out]) == 2
    cfg = write_config(tmp_path)
    assert cli.main(["--config", cfg, "--scene", "sphere", "--frames", "0", "--output", out]) == 2
    (tmp_path / "empty").mkdir()
    assert cli.main(["--config", cfg, "--input", str(tmp_path / "empty"), "--output", out]) == 3
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "000.raw").write_bytes(b"JUNK")
    assert cli.main(["--config", cfg, "--input", str(tmp_path / "bad"), "--output", out]) == 3
    assert "frame 0" in capsys.readouterr().err
    (tmp_path / "blank").mkdir()
    write_raw(tmp_path / "blank" / "000.raw", np.zeros((4, 4)))
    assert cli.main(["--config", cfg, "--input", str(tmp_path / "blank"), "--output", out]) == 5
    with pytest.raises(SystemExit):
        cli.main(["--config", cfg, "--output", out])
