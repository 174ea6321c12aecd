"""Run configuration: every tunable in one JSON document, flags override file values."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .optim import SolverConfig
from .preprocess import BlurPolicy, KeyframePolicy
from .scan import WeightModel


class ConfigError(ValueError):
    pass


@dataclass
class WeightSection:
    sigma_pixel: float = 0.1
    sigma_range_per_m: float = 0.005

    def model(self) -> WeightModel:
        return WeightModel(self.sigma_pixel, self.sigma_range_per_m)


@dataclass
class KeyframeSection:
    min_translation_m: float = 5.0
    min_rotation_deg: float = 30.0

    def policy(self) -> KeyframePolicy:
        return KeyframePolicy(self.min_translation_m, math.radians(self.min_rotation_deg))


@dataclass
class BlurSection:
    intensity_threshold: float = 0.5
    occupancy_bound: float = 0.003
    sigma_step_px: float = 1.0
    sigma_max_px: float = 15.0
    enabled: bool = True

    def policy(self) -> BlurPolicy:
        return BlurPolicy(self.intensity_threshold, self.occupancy_bound, self.sigma_step_px, self.sigma_max_px)


@dataclass
class MaskSection:
    low: float = 0.2
    high: float = 0.9
    enabled: bool = True


@dataclass
class SolverSection:
    max_iterations: int = 50
    update_tolerance: float = 1e-6
    cost_rel_tolerance: float = 1e-9
    damping: float = 0.0
    stall_tolerance: float = 1e-3

    def config(self, jacobian_mode: str, max_iterations: Optional[int] = None) -> SolverConfig:
        return SolverConfig(
            max_iterations=self.max_iterations if max_iterations is None else max_iterations,
            update_tolerance=self.update_tolerance,
            cost_rel_tolerance=self.cost_rel_tolerance,
            damping=self.damping,
            jacobian_mode=jacobian_mode,
            stall_tolerance=self.stall_tolerance,
        )


@dataclass
class LocalizerSection:
    max_iterations: int = 20


@dataclass
class SimulateSection:
    preset: str = "structured"
    world_seed: int = 0
    world_half_extent_m: float = 80.0
    world_resolution_m: float = 0.25
    trajectory: str = "circle"  # circle | out_and_back | stationary
    n_poses: int = 60
    radius_m: float = 15.0
    length_m: float = 60.0
    spacing_m: float = 2.0
    lateral_m: float = 0.0
    scan_width: int = 60
    scan_height: int = 60
    scan_resolution_m: float = 0.5
    noise_sigma: float = 0.1
    psf_sigma_px: float = 1.0
    occlusion: bool = False
    init_trans_m: float = 1.0
    init_rot_deg: float = 0.5
    odom_trans_sigma_m: float = 0.02
    odom_rot_sigma_deg: float = 0.1


@dataclass
class EvalSection:
    min_travel_m: float = 300.0
    max_euclid_m: float = 25.0
    epe_start_index: int = 0


@dataclass
class RunConfig:
    """Fully resolved settings of one run; written next to every output."""

    seed: int = 0
    threads: int = 1
    r_v: float = 1.0
    jacobian_mode: str = "exact_varpro"
    dump_hessian_pattern: bool = False
    weight: WeightSection = field(default_factory=WeightSection)
    keyframe: KeyframeSection = field(default_factory=KeyframeSection)
    blur: BlurSection = field(default_factory=BlurSection)
    mask: MaskSection = field(default_factory=MaskSection)
    solver: SolverSection = field(default_factory=SolverSection)
    localizer: LocalizerSection = field(default_factory=LocalizerSection)
    simulate: SimulateSection = field(default_factory=SimulateSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.r_v <= 0:
            raise ConfigError("r_v must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        try:
            self.solver.config(self.jacobian_mode)
            self.blur.policy()
            self.keyframe.policy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0 <= self.mask.low <= self.mask.high <= 1:
            raise ConfigError("mask thresholds must satisfy 0 <= low <= high <= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) at {where or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def with_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply dotted-key overrides such as ``{"blur.intensity_threshold": 0.4}``."""
    data = cfg.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if parts[-1] not in node and parts[0] != "paths":
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = value
    return from_dict(data)
