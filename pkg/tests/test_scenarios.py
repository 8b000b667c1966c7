from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from krflow.config import RunConfig
from krflow.errors import CheckpointError, ConfigError
from krflow.scenarios import EXIT_OK, run_scenario


def _config(tmp_path, **sections) -> RunConfig:
    data = {"grid": {"half_width": 20.0, "points": 401}, "output": {"directory": str(tmp_path)}}
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return RunConfig.from_dict(data)


@pytest.fixture(scope="module")
def fixed_point_cfg(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    return _config(
        out,
        run={"scenario": "run-flow", "horizon": 0.5, "sample_every": 0.25, "ms": [4], "checkpoint_every": 1},
        perturbation={"shape": "none"},
    )


@pytest.fixture(scope="module")
def fixed_point_run(fixed_point_cfg):
    return run_scenario(fixed_point_cfg)


def test_fixed_point_run_artifacts(fixed_point_run):
    root = fixed_point_run.run_dir.root
    for name in ("trajectory.csv", "steps.csv", "functionals.csv", "drift.csv", "trajectory_normalized.csv"):
        assert (root / name).exists(), name
    assert fixed_point_run.run_dir.checkpoint_path.exists()
    assert (root.parent / "latest_run").resolve() == root
    summary = json.loads((root / "summary.json").read_text())
    assert summary["scenario"] == "run-flow"
    assert summary["verdict"] == "converged"
    assert summary["exit_code"] == fixed_point_run.exit_code
    assert len(pd.read_csv(root / "trajectory.csv")) == 3


def test_fixed_point_run_gates(fixed_point_run):
    gates = fixed_point_run.gates
    for name in ("flow_converged", "monitors_bounded", "dirichlet_nonnegative", "mabuchi_monotone", "fixed_point_drift"):
        assert gates[name], name
    assert "curvature_decay" not in gates
    assert fixed_point_run.summary["fixed_point_drift"] <= 1e-8


def test_resume_from_finished_checkpoint(fixed_point_cfg, fixed_point_run):
    root = fixed_point_run.run_dir.root
    before = (root / "trajectory.csv").read_text()
    resumed = run_scenario(fixed_point_cfg, resume=fixed_point_run.run_dir.checkpoint_path)
    assert resumed.run_dir.root == root
    assert (root / "trajectory.csv").read_text() == before


def test_resume_rejects_other_configs(fixed_point_cfg, fixed_point_run):
    other = fixed_point_cfg.with_overrides(seed=99)
    with pytest.raises(CheckpointError, match="hash"):
        run_scenario(other, resume=fixed_point_run.run_dir.checkpoint_path)


def test_resume_only_for_run_flow(tmp_path):
    cfg = _config(tmp_path, run={"scenario": "tyzc-scan"})
    with pytest.raises(ConfigError, match="run-flow only"):
        run_scenario(cfg, resume=tmp_path / "latest.npz")


def test_decay_study_needs_long_horizon(tmp_path):
    cfg = _config(tmp_path, run={"scenario": "decay-study", "horizon": 2.0, "min_horizon": 5.0})
    with pytest.raises(ConfigError, match="below the minimum"):
        run_scenario(cfg)
    assert not any(tmp_path.iterdir())


def test_tyzc_scan_reference(tmp_path):
    cfg = _config(
        tmp_path,
        grid={"half_width": 28.0, "points": 561},
        model={"m_max": 16},
        run={"scenario": "tyzc-scan", "ms": [4]},
        bergman={"ms": [2, 4, 8], "trajectory_m": 8},
        perturbation={"shape": "none"},
    )
    result = run_scenario(cfg)
    assert result.exit_code == EXIT_OK, result.gates
    assert set(result.gates) == {"density_integral", "riemann_roch_exact", "reference_exact", "reference_balanced"}
    audit = pd.read_csv(result.run_dir.root / "dimension_audit.csv")
    assert audit["n_sections"].tolist() == [5, 9, 17]
    assert not (result.run_dir.root / "tyzc_perturbed.csv").exists()


def test_stability_probe_at_reference(tmp_path):
    cfg = _config(
        tmp_path,
        run={"scenario": "stability-probe"},
        probe={"m": 4, "rays": 2, "s_max": 1.0, "s_samples": 5},
        perturbation={"shape": "none"},
    )
    result = run_scenario(cfg)
    root = result.run_dir.root
    assert sorted(p.name for p in root.glob("ray_*.csv")) == ["ray_00.csv", "ray_01.csv", "ray_02.csv"]
    minima = pd.read_csv(root / "minima.csv")
    assert minima["ray"].tolist() == [0, 1, 2]
    for name in ("minima_finite", "jensen_identity", "chain_equalities", "identity_ray_constant", "scale_invariance"):
        assert result.gates[name], name
    assert len(result.summary["weights"]) == 2


def test_functional_audit_small(tmp_path):
    cfg = _config(
        tmp_path,
        run={"scenario": "functional-audit", "seed": 3},
        probe={"m": 4, "audit_potentials": 3},
    )
    result = run_scenario(cfg)
    frame = pd.read_csv(result.run_dir.root / "audit.csv")
    assert len(frame) == 3
    for name in ("all_evaluated", "cocycle", "j_nonnegative", "path_independence"):
        assert result.gates[name], name
    assert result.summary["max_shift"] < 1e-8


def test_perturbed_flow_to_unit_time(tmp_path):
    cfg = _config(tmp_path, run={"scenario": "run-flow", "horizon": 1.0, "sample_every": 0.1, "ms": [4]})
    result = run_scenario(cfg)
    summary = result.summary
    assert summary["converged"] and summary["aborted_reason"] is None
    assert summary["horizon_reached"] == pytest.approx(1.0)
    for name in ("flow_converged", "monitors_bounded", "dirichlet_nonnegative", "mabuchi_monotone", "gamma_positive"):
        assert result.gates[name], name
    phi0 = summary["phi0_star"]
    assert abs(phi0["value"] - phi0["gauge"]) <= phi0["error"]
    normalized = pd.read_csv(result.run_dir.root / "trajectory_normalized.csv")
    assert len(normalized) == 11
    assert np.all(np.isfinite(normalized["sup_phidot"]))


def test_decay_study_on_square_grid(tmp_path):
    cfg = _config(
        tmp_path,
        model={"name": "cp1xcp1", "m_max": 4},
        grid={"half_width": 14.0, "points": 57},
        perturbation={"shape": "random", "amplitude": 0.2},
        run={"scenario": "decay-study", "horizon": 0.5, "sample_every": 0.1, "min_horizon": 0.5, "ms": [2]},
        bergman={"ms": [2, 4], "trajectory_m": 4},
        probe={"m": 4},
    )
    result = run_scenario(cfg)
    summary = result.summary
    assert summary["converged"] and summary["extension_converged"]
    assert summary["horizon_reached"] == pytest.approx(0.5)
    assert summary["extended_horizon_reached"] == pytest.approx(0.6)
    for key in ("gamma_stability_shorter", "gamma_stability_longer"):
        assert key in summary
    assert summary["verdict"] != "insufficient-samples"
    assert np.isfinite(summary["mabuchi_slope"])
    assert set(result.gates) >= {"verdict_expected", "gamma_stable"}
    root = result.run_dir.root
    assert len(pd.read_csv(root / "trajectory.csv")) == 6
    assert len(pd.read_csv(root / "trajectory_extended.csv")) == 7


def test_tyzc_scan_slope_on_algebraic_metric(tmp_path):
    cfg = _config(
        tmp_path,
        grid={"half_width": 28.0, "points": 561},
        model={"m_max": 32},
        perturbation={"shape": "algebraic", "amplitude": -0.2},
        run={"scenario": "tyzc-scan", "horizon": 0.5, "sample_every": 0.25, "ms": [4]},
        bergman={"ms": [8, 16, 32], "trajectory_m": 8, "trajectory_times": [0.25, 0.5], "tail_tolerance": 1e-8},
    )
    result = run_scenario(cfg)
    assert result.gates["tyzc_slope"], result.summary["slope"]
    assert -1.2 <= result.summary["slope"]["value"] <= -0.8
    for name in ("density_integral", "reference_exact", "trajectory_bounded"):
        assert result.gates[name], name
