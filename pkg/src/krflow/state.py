from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import CheckpointError
from .flow import LEDGER_COLUMNS, FlowSample, FlowTrajectory, IntegratorState
from .geometry import PotentialField
from .utils import (
    atomic_write_csv,
    atomic_write_json,
    atomic_write_npz,
    base_dir,
    ensure_dir,
    iso_now,
    read_json,
    sanitize_tag,
    update_latest_symlink,
)

logger = logging.getLogger(__name__)

SUMMARY_FILENAME = "summary.json"
CONFIG_FILENAME = "config.json"
CHECKPOINT_FILENAME = "latest.npz"
FORMAT_VERSION = 1
_STEP_COLUMNS = ["t", "dt", "error", "accepted"]


class RunDirectory:
    """<out>/<scenario>-<hash12>/ with summary, config, CSV artifacts and checkpoints/."""

    def __init__(self, root: Path):
        self.root = root
        self.checkpoints_dir = self.root / "checkpoints"
        self.summary_path = self.root / SUMMARY_FILENAME
        self.config_path = self.root / CONFIG_FILENAME

    @staticmethod
    def for_run(out: Optional[Path], scenario: str, config_hash: str) -> "RunDirectory":
        base = Path(out).resolve() if out is not None else base_dir()
        name = f"{sanitize_tag(scenario) or 'run'}-{config_hash[:12]}"
        return RunDirectory(base / name)

    @property
    def base(self) -> Path:
        return self.root.parent

    @property
    def checkpoint_path(self) -> Path:
        return self.checkpoints_dir / CHECKPOINT_FILENAME

    def ensure_layout(self) -> None:
        ensure_dir(self.root)
        ensure_dir(self.checkpoints_dir)

    def write_config(self, config: Dict[str, Any], config_hash: str) -> None:
        atomic_write_json(self.config_path, {"config_hash": config_hash, "config": config})

    def mark_latest(self) -> None:
        update_latest_symlink(self.base, self.root)


def write_csv(run_dir: RunDirectory, name: str, frame: pd.DataFrame) -> Path:
    path = run_dir.root / name
    atomic_write_csv(path, frame)
    logger.debug("wrote %s (%d rows)", path, len(frame))
    return path


def write_summary(run_dir: RunDirectory, summary: Dict[str, Any]) -> Path:
    payload = {"finished_at": iso_now(), **summary}
    atomic_write_json(run_dir.summary_path, payload)
    return run_dir.summary_path


def read_summary(run_dir: RunDirectory) -> Dict[str, Any]:
    return read_json(run_dir.summary_path, default={})


def save_checkpoint(path: Path, traj: FlowTrajectory, st: IntegratorState, config_hash: str) -> None:
    """Integrator state plus every sample so far; resuming reproduces the uninterrupted run."""
    samples = traj.samples
    steps = np.array([[s[c] for c in _STEP_COLUMNS] for s in traj.steps], dtype=float).reshape(-1, 4)
    arrays = {
        "format_version": np.array(FORMAT_VERSION),
        "config_hash": np.array(config_hash),
        "grid": np.array([traj.grid.half_width, traj.grid.points_per_axis, traj.grid.dimension], dtype=float),
        "t": np.array(st.t),
        "u": st.u,
        "kappa": np.array(st.kappa),
        "dt": np.array(st.dt),
        "sample_index": np.array(st.sample_index),
        "counts": np.array([st.accepted, st.rejected]),
        "c_omega": np.array(traj.c_omega),
        "f_mean": np.array(traj.f_mean),
        "sample_t": np.array([s.t for s in samples]),
        "sample_u": np.stack([s.u for s in samples]),
        "sample_kappa": np.array([s.kappa for s in samples]),
        "sample_phidot": np.stack([s.phidot for s in samples]),
        "sample_logdet": np.stack([s.logdet for s in samples]),
        "ledger": np.array([[row[c] for c in LEDGER_COLUMNS] for row in traj.rows], dtype=float),
        "steps": steps,
    }
    ensure_dir(path.parent)
    atomic_write_npz(path, arrays)


def load_checkpoint(
    path: Path, config_hash: str, initial: PotentialField
) -> Tuple[FlowTrajectory, IntegratorState]:
    """Restore a trajectory and integrator state; the config hash must match the writer's."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    with data:
        version = int(data["format_version"])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format {version} is not supported (expected {FORMAT_VERSION})")
        stored = str(data["config_hash"])
        if stored != config_hash:
            raise CheckpointError(f"checkpoint config hash {stored} does not match run config {config_hash}")
        grid = initial.grid
        header = [grid.half_width, grid.points_per_axis, grid.dimension]
        if not np.allclose(data["grid"], header):
            raise CheckpointError("checkpoint grid header does not match the configured grid")
        traj = FlowTrajectory(initial=initial, c_omega=float(data["c_omega"]), f_mean=float(data["f_mean"]))
        for i, t in enumerate(data["sample_t"]):
            traj.samples.append(
                FlowSample(
                    t=float(t),
                    u=data["sample_u"][i].copy(),
                    kappa=float(data["sample_kappa"][i]),
                    phidot=data["sample_phidot"][i].copy(),
                    logdet=data["sample_logdet"][i].copy(),
                )
            )
            traj.rows.append({c: float(v) for c, v in zip(LEDGER_COLUMNS, data["ledger"][i])})
        for row in data["steps"]:
            traj.steps.append({"t": row[0], "dt": row[1], "error": row[2], "accepted": bool(row[3])})
        accepted, rejected = (int(v) for v in data["counts"])
        st = IntegratorState(
            t=float(data["t"]),
            u=data["u"].copy(),
            kappa=float(data["kappa"]),
            dt=float(data["dt"]),
            sample_index=int(data["sample_index"]),
            accepted=accepted,
            rejected=rejected,
        )
    return traj, st


@dataclass
class RunRecord:
    root: Path
    scenario: str
    config_hash: str
    verdict: str
    exit_code: Optional[int]
    finished_at: Optional[str]


def list_runs(out: Optional[Path] = None) -> List[RunRecord]:
    """Run directories under the output base that carry a summary, oldest first."""
    base = Path(out).resolve() if out is not None else base_dir()
    if not base.exists():
        return []
    records: List[RunRecord] = []
    for child in sorted(base.iterdir()):
        if child.is_symlink() or not child.is_dir():
            continue
        summary = read_json(child / SUMMARY_FILENAME, default=None)
        if not isinstance(summary, dict):
            continue
        records.append(
            RunRecord(
                root=child,
                scenario=str(summary.get("scenario", "?")),
                config_hash=str(summary.get("config_hash", "?")),
                verdict=str(summary.get("verdict", "?")),
                exit_code=summary.get("exit_code"),
                finished_at=summary.get("finished_at"),
            )
        )
    records.sort(key=lambda r: r.finished_at or "")
    return records
