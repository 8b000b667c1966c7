from __future__ import annotations

import numpy as np
import pandas as pd
import pytest

from krflow.errors import CheckpointError
from krflow.flow import FlowSettings, run, start
from krflow.geometry import Grid, reference_field
from krflow.state import (
    RunDirectory,
    list_runs,
    load_checkpoint,
    read_summary,
    save_checkpoint,
    write_csv,
    write_summary,
)

HASH = "0123456789abcdef"


@pytest.fixture(scope="module")
def short_flow(bumped):
    settings = FlowSettings(horizon=0.2, sample_every=0.1)
    traj, st = start(bumped, settings)
    run(bumped, settings, resume=(traj, st))
    return traj, st


def test_run_directory_layout(tmp_path):
    run_dir = RunDirectory.for_run(tmp_path, "run flow", HASH)
    assert run_dir.root == tmp_path.resolve() / "run-flow-0123456789ab"
    run_dir.ensure_layout()
    assert run_dir.checkpoints_dir.is_dir()
    run_dir.write_config({"grid": {"points": 9}}, HASH)
    write_csv(run_dir, "table.csv", pd.DataFrame({"t": [0.0, 0.5]}))
    assert (run_dir.root / "table.csv").read_text().splitlines()[0] == "t"
    write_summary(run_dir, {"scenario": "run-flow", "verdict": "converged"})
    summary = read_summary(run_dir)
    assert summary["verdict"] == "converged"
    assert "finished_at" in summary
    run_dir.mark_latest()
    assert (tmp_path / "latest_run").resolve() == run_dir.root


def test_checkpoint_roundtrip(tmp_path, short_flow, bumped):
    traj, st = short_flow
    path = tmp_path / "checkpoints" / "latest.npz"
    save_checkpoint(path, traj, st, HASH)
    loaded, loaded_st = load_checkpoint(path, HASH, bumped)
    assert len(loaded.samples) == len(traj.samples) == 3
    np.testing.assert_array_equal(loaded.samples[-1].u, traj.samples[-1].u)
    np.testing.assert_array_equal(loaded_st.u, st.u)
    assert loaded_st.sample_index == st.sample_index
    assert (loaded_st.accepted, loaded_st.rejected) == (st.accepted, st.rejected)
    assert loaded.c_omega == traj.c_omega
    pd.testing.assert_frame_equal(loaded.ledger(), traj.ledger())
    assert len(loaded.steps) == len(traj.steps)


def test_checkpoint_rejects_mismatches(tmp_path, short_flow, bumped, cp1):
    traj, st = short_flow
    path = tmp_path / "latest.npz"
    save_checkpoint(path, traj, st, HASH)
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(path, "fedcba9876543210", bumped)
    other = reference_field(cp1, Grid(half_width=20.0, points_per_axis=201))
    with pytest.raises(CheckpointError, match="grid"):
        load_checkpoint(path, HASH, other)
    garbage = tmp_path / "garbage.npz"
    garbage.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(garbage, HASH, bumped)


def test_list_runs(tmp_path):
    assert list_runs(tmp_path / "nothing") == []
    older = RunDirectory.for_run(tmp_path, "decay-study", "a" * 16)
    newer = RunDirectory.for_run(tmp_path, "run-flow", "b" * 16)
    for run_dir, stamp in ((newer, "2026-02-01T00:00:00Z"), (older, "2026-01-01T00:00:00Z")):
        run_dir.ensure_layout()
        write_summary(run_dir, {"scenario": run_dir.root.name.rsplit("-", 1)[0], "finished_at": stamp})
    (tmp_path / "no-summary").mkdir()
    newer.mark_latest()
    records = list_runs(tmp_path)
    assert [r.root.name for r in records] == [older.root.name, newer.root.name]
    assert records[0].scenario == "decay-study"
    assert records[1].verdict == "?"
