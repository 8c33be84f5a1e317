"""Pipeline configuration: JSON file, defaults, and CLI overrides."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..registration import SolverConfig


class ConfigError(ValueError):
    pass


@dataclass
class Intrinsics:
    fx: float = 160.0
    fy: float = 160.0
    cx: float = 79.5
    cy: float = 59.5


@dataclass
class PipelineConfig:
    k: int = 1
    voxel: float = 0.004
    # EDG lattice; None -> derived from the scene or the first frame
    volume_origin: list | None = None
    volume_nodes: list | None = None
    margin_cells: int = 3
    max_voxels_per_axis: int = 128
    intrinsics: Intrinsics = field(default_factory=Intrinsics)
    solver: SolverConfig = field(default_factory=SolverConfig)
    topology: bool = True
    nonrigid: bool = True
    use_known_pose: bool = True
    use_sparse: bool = True
    min_component_fraction: float = 0.05
    backward_sweeps: int = 2
    off_surface_cells: float = 1.0
    scene: dict = field(default_factory=dict)
    frames: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.k not in (1, 2, 3):
            raise ConfigError("k must be 1, 2 or 3")
        if self.voxel <= 0:
            raise ConfigError("voxel spacing must be positive")
        if not 0 <= self.min_component_fraction < 1:
            raise ConfigError("min_component_fraction must be in [0, 1)")
        if isinstance(self.intrinsics, dict):
            self.intrinsics = Intrinsics(**self.intrinsics)
        if isinstance(self.solver, dict):
            solver = dict(self.solver)
            if "corr_normal_max_angle_deg" in solver:
                solver["corr_normal_max_angle"] = np.deg2rad(solver.pop("corr_normal_max_angle_deg"))
            self.solver = SolverConfig(**solver)

    @property
    def edg_spacing(self) -> float:
        # the EDG:TSDF resolution ratio is 1:(2k+1) per axis
        return (2 * self.k + 1) * self.voxel

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["solver"] = asdict(self.solver)
        return out

    def with_overrides(self, **overrides) -> "PipelineConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return PipelineConfig.from_dict(data)
