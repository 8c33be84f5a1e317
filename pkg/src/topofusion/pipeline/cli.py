"""Command line entry point: ``reconstruct``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..grid_core import GridError
from ..meshing import StaleReferenceError, read_obj, read_ply
from .config import ConfigError, PipelineConfig
from .io import FrameFormatError, list_frames, load_frame
from .run import (FrameInput, ReconstructionError, configured_lattice, export_playback, run_reconstruction,
                  scene_source, write_outputs)
from .scenes import SCENES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_STRUCTURE = 4
EXIT_RECONSTRUCTION = 5

log = logging.getLogger("topofusion")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reconstruct", description="Topology-aware non-rigid volumetric fusion.")
    p.add_argument("--config", required=True, help="JSON configuration file")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="directory of depth frames (.png in mm or .raw in m)")
    src.add_argument("--scene", choices=SCENES, help="synthetic scene name")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--frames", type=int, help="process at most N frames")
    p.add_argument("--no-topology", action="store_true", help="disable topology change handling")
    p.add_argument("--metrics", help="directory of ground-truth meshes, one per frame (live camera frame)")
    p.add_argument("--off-surface-cells", type=float,
                   help="distance (in TSDF cell widths) beyond which a vertex counts as off the surface")
    p.add_argument("--export-playback", action="store_true", help="write the canonical mesh warped to every frame")
    p.add_argument("--verbose", action="store_true", help="debug logging and solver telemetry")
    return p


def load_gt(directory, n: int) -> list:
    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".obj", ".ply"))
    if len(files) < n:
        raise FrameFormatError(f"{directory} holds {len(files)} ground-truth meshes for {n} frames")
    out = []
    for p in files[:n]:
        v, f = read_obj(p) if p.suffix.lower() == ".obj" else read_ply(p)[:2]
        out.append((v, f))
    return out


def input_source(config: PipelineConfig, directory, gt_dir=None):
    files = list_frames(directory)
    if config.frames is not None:
        files = files[: config.frames]
    gt = load_gt(gt_dir, len(files)) if gt_dir else [None] * len(files)
    # fail on unreadable frames before any work is done
    frames = []
    for i, p in enumerate(files):
        try:
            frames.append(load_frame(p, config.intrinsics))
        except FrameFormatError as exc:
            raise FrameFormatError(f"frame {i}: {exc}") from exc
    return (FrameInput(f, g) for f, g in zip(frames, gt))


def run(args) -> int:
    config = PipelineConfig.load(args.config)
    overrides = {"frames": args.frames, "off_surface_cells": args.off_surface_cells}
    if args.no_topology:
        overrides["topology"] = False
    if args.scene:
        overrides["scene"] = {**config.scene, "name": args.scene}
    config = config.with_overrides(**overrides)
    if config.frames is not None and config.frames < 1:
        raise ConfigError("--frames must be positive")

    if args.scene:
        frames, dims, _ = scene_source(config)
    else:
        frames, dims = input_source(config, args.input, args.metrics), configured_lattice(config)
    result = run_reconstruction(config, frames, dims)
    write_outputs(result, args.output, config, verbose=args.verbose)
    if args.export_playback:
        export_playback(result.mesh, result.graph, result.records, Path(args.output) / "playback")
    log.info("done: %d frames, %d topology updates, %d vertices",
             len(result.records), result.updates, result.mesh.n_vertices)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FrameFormatError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GridError, StaleReferenceError) as exc:
        print(f"structural error: {exc}", file=sys.stderr)
        return EXIT_STRUCTURE
    except ReconstructionError as exc:
        print(f"reconstruction error: {exc}", file=sys.stderr)
        return EXIT_RECONSTRUCTION


if __name__ == "__main__":
    sys.exit(main())
