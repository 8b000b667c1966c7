from __future__ import annotations

import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from .errors import ConfigError
from .flow import FlowSettings
from .utils import config_hash

SCENARIOS = ("run-flow", "tyzc-scan", "stability-probe", "functional-audit", "decay-study")
PERTURBATION_SHAPES = ("none", "constant", "bump", "offset-bump", "random", "algebraic")


@dataclass(frozen=True)
class ModelSection:
    name: str = "cp1"
    polytope: Optional[str] = None  # path to a polytope file; overrides name
    m_max: int = 64


@dataclass(frozen=True)
class GridSection:
    half_width: float = 20.0
    points: int = 801


@dataclass(frozen=True)
class PerturbationSection:
    shape: str = "bump"  # none | bump | offset-bump | random | constant | algebraic
    amplitude: float = 0.3
    width: float = 1.5
    count: int = 4


@dataclass(frozen=True)
class IntegratorSection:
    dt0: float = 1e-3
    dt_min: float = 1e-8
    dt_max: float = 0.05
    tolerance: float = 1e-6


@dataclass(frozen=True)
class RunSection:
    scenario: str = "run-flow"
    horizon: float = 20.0
    sample_every: float = 0.1
    min_horizon: float = 5.0
    seed: int = 0
    ms: Tuple[int, ...] = (8, 16, 32)
    decay_threshold: float = 1e-3
    checkpoint_every: int = 10


@dataclass(frozen=True)
class BergmanSection:
    ms: Tuple[int, ...] = (8, 16, 32, 64)
    tail_tolerance: float = 1e-6
    trajectory_m: int = 32
    trajectory_times: Tuple[float, ...] = (5.0, 10.0, 15.0, 20.0)


@dataclass(frozen=True)
class ProbeSection:
    m: int = 8
    rays: int = 10
    s_max: float = 3.0
    s_samples: int = 21
    audit_potentials: int = 100


@dataclass(frozen=True)
class OutputSection:
    directory: Optional[str] = None


_SECTIONS = {
    "model": ModelSection,
    "grid": GridSection,
    "perturbation": PerturbationSection,
    "integrator": IntegratorSection,
    "run": RunSection,
    "bergman": BergmanSection,
    "probe": ProbeSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    grid: GridSection = field(default_factory=GridSection)
    perturbation: PerturbationSection = field(default_factory=PerturbationSection)
    integrator: IntegratorSection = field(default_factory=IntegratorSection)
    run: RunSection = field(default_factory=RunSection)
    bergman: BergmanSection = field(default_factory=BergmanSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    output: OutputSection = field(default_factory=OutputSection)

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> "RunConfig":
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        parts = {name: _section(name, cls, d.get(name, {})) for name, cls in _SECTIONS.items()}
        cfg = RunConfig(**parts)
        cfg.validate()
        return cfg

    def to_dict(self) -> Dict[str, Any]:
        return {name: asdict(getattr(self, name)) for name in _SECTIONS}

    def numerics(self) -> Dict[str, Any]:
        """Everything that influences the numbers; the output location is excluded."""
        d = self.to_dict()
        d.pop("output")
        return d

    @property
    def hash(self) -> str:
        return config_hash(self.numerics())[:12]

    def with_overrides(self, out: Optional[Path] = None, seed: Optional[int] = None) -> "RunConfig":
        cfg = self
        if out is not None:
            cfg = replace(cfg, output=replace(cfg.output, directory=str(out)))
        if seed is not None:
            cfg = replace(cfg, run=replace(cfg.run, seed=int(seed)))
        return cfg

    def flow_settings(self) -> FlowSettings:
        return FlowSettings(
            horizon=self.run.horizon,
            sample_every=self.run.sample_every,
            dt0=self.integrator.dt0,
            dt_min=self.integrator.dt_min,
            dt_max=self.integrator.dt_max,
            tolerance=self.integrator.tolerance,
        )

    def validate(self) -> None:
        if self.run.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.run.scenario!r}; choose from {', '.join(SCENARIOS)}")
        if self.perturbation.shape not in PERTURBATION_SHAPES:
            raise ConfigError(
                f"unknown perturbation shape {self.perturbation.shape!r}; choose from {', '.join(PERTURBATION_SHAPES)}"
            )
        positive = {
            "grid.half_width": self.grid.half_width,
            "grid.points": self.grid.points,
            "model.m_max": self.model.m_max,
            "perturbation.width": self.perturbation.width,
            "perturbation.count": self.perturbation.count,
            "integrator.dt0": self.integrator.dt0,
            "integrator.dt_min": self.integrator.dt_min,
            "integrator.dt_max": self.integrator.dt_max,
            "integrator.tolerance": self.integrator.tolerance,
            "run.horizon": self.run.horizon,
            "run.sample_every": self.run.sample_every,
            "run.decay_threshold": self.run.decay_threshold,
            "run.checkpoint_every": self.run.checkpoint_every,
            "bergman.tail_tolerance": self.bergman.tail_tolerance,
            "bergman.trajectory_m": self.bergman.trajectory_m,
            "probe.m": self.probe.m,
            "probe.rays": self.probe.rays,
            "probe.s_max": self.probe.s_max,
            "probe.s_samples": self.probe.s_samples,
            "probe.audit_potentials": self.probe.audit_potentials,
        }
        for key, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{key} must be positive (got {value})")
        if self.grid.points % 2 == 0 or self.grid.points < 7:
            raise ConfigError("grid.points must be odd and >= 7")
        if self.integrator.dt_min > self.integrator.dt_max:
            raise ConfigError("integrator.dt_min exceeds integrator.dt_max")
        if self.run.min_horizon < 0:
            raise ConfigError("run.min_horizon must be >= 0")
        for key, ms in (("run.ms", self.run.ms), ("bergman.ms", self.bergman.ms)):
            if any(m < 1 for m in ms):
                raise ConfigError(f"{key} entries must be >= 1")
            if any(m > self.model.m_max for m in ms):
                raise ConfigError(f"{key} exceeds model.m_max={self.model.m_max}")
        if self.probe.m > self.model.m_max or self.bergman.trajectory_m > self.model.m_max:
            raise ConfigError(f"probe.m and bergman.trajectory_m must not exceed model.m_max={self.model.m_max}")


def _section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")
    values = {}
    for key, value in raw.items():
        default = known[key].default
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{name}.{key} must be an array")
            value = tuple(value)
        elif isinstance(default, bool) or isinstance(value, bool):
            raise ConfigError(f"{name}.{key} must not be a boolean")
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        elif default is not None and not isinstance(value, type(default)):
            raise ConfigError(f"{name}.{key} must be {type(default).__name__}, got {type(value).__name__}")
        values[key] = value
    return cls(**values)


def load_config(path: Path) -> RunConfig:
    """Parse a TOML run configuration."""
    try:
        with Path(path).open("rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return RunConfig.from_dict(data)
