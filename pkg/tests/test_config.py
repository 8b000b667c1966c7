from __future__ import annotations

from pathlib import Path

import pytest

from krflow.config import SCENARIOS, RunConfig, load_config
from krflow.errors import ConfigError
from krflow.geometry import build_model, get_model, load_polytope_file

SAMPLE = """
[model]
name = "bl1cp2"
m_max = 16

[grid]
half_width = 14
points = 129

[run]
scenario = "decay-study"
horizon = 15
ms = [4, 8]

[bergman]
ms = [4, 8, 16]
tail_tolerance = 1e-4
trajectory_m = 8
"""


def _write(tmp_path: Path, text: str) -> Path:
    path = tmp_path / "run.toml"
    path.write_text(text)
    return path


def test_defaults_validate():
    cfg = RunConfig()
    cfg.validate()
    assert cfg.run.scenario in SCENARIOS
    assert cfg.grid.points % 2 == 1


def test_load_config(tmp_path):
    cfg = load_config(_write(tmp_path, SAMPLE))
    assert cfg.model.name == "bl1cp2"
    assert cfg.grid.half_width == 14.0 and isinstance(cfg.grid.half_width, float)
    assert cfg.run.ms == (4, 8)
    assert cfg.bergman.tail_tolerance == 1e-4
    # untouched sections keep their defaults
    assert cfg.probe == RunConfig().probe


def test_round_trip_through_dict(tmp_path):
    cfg = load_config(_write(tmp_path, SAMPLE))
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_hash_ignores_output_location(tmp_path):
    cfg = RunConfig()
    assert len(cfg.hash) == 12
    assert cfg.with_overrides(out=tmp_path).hash == cfg.hash
    assert cfg.with_overrides(seed=7).hash != cfg.hash
    assert cfg.with_overrides(out=tmp_path).output.directory == str(tmp_path)


def test_flow_settings_mapping():
    cfg = RunConfig.from_dict({"run": {"horizon": 2.0, "sample_every": 0.5}, "integrator": {"tolerance": 1e-7}})
    settings = cfg.flow_settings()
    assert settings.horizon == 2.0
    assert settings.sample_every == 0.5
    assert settings.tolerance == 1e-7
    assert len(settings.sample_times()) == 5


@pytest.mark.parametrize(
    "data, message",
    [
        ({"modle": {}}, "unknown config section"),
        ({"grid": {"spacing": 0.1}}, "unknown key"),
        ({"grid": {"points": "many"}}, "must be int"),
        ({"grid": {"points": True}}, "boolean"),
        ({"grid": []}, "must be a table"),
        ({"run": {"ms": 8}}, "must be an array"),
        ({"grid": {"points": 400}}, "odd"),
        ({"grid": {"half_width": -1.0}}, "grid.half_width must be positive"),
        ({"run": {"scenario": "everything"}}, "unknown scenario"),
        ({"perturbation": {"shape": "spiral"}}, "unknown perturbation shape"),
        ({"run": {"ms": [0, 4]}}, "entries must be >= 1"),
        ({"model": {"m_max": 8}, "run": {"ms": [4]}, "bergman": {"ms": [16]}}, "bergman.ms exceeds"),
        ({"integrator": {"dt_min": 0.1, "dt_max": 0.01}}, "dt_min exceeds"),
        ({"probe": {"m": 128}}, "must not exceed"),
    ],
)
def test_invalid_configs(data, message):
    with pytest.raises(ConfigError, match=message):
        RunConfig.from_dict(data)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "[grid\npoints = 3"))


CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = load_config(path)
    assert cfg.run.scenario in SCENARIOS


def test_shipped_polytope_matches_builtin_model():
    model = build_model(load_polytope_file(CONFIGS / "polytopes" / "bl1cp2.txt"), 3, name="bl1cp2")
    builtin = get_model("bl1cp2", m_max=3)
    assert [model.n_sections(m) for m in (1, 2, 3)] == [builtin.n_sections(m) for m in (1, 2, 3)]
    assert model.volume == pytest.approx(builtin.volume)
