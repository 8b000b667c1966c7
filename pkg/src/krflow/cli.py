from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Optional

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from . import __version__
from .config import RunConfig, load_config
from .errors import KRFlowError
from .scenarios import EXIT_ABORTED, ScenarioResult, run_scenario
from .state import CONFIG_FILENAME, list_runs
from .utils import elapsed_since, read_json

app = typer.Typer(no_args_is_help=True)
console = Console()

ConfigOption = typer.Option(None, "--config", help="TOML run configuration")
OutOption = typer.Option(None, "--out", help="Artifact base directory (default $KRFLOW_HOME or ./krflow-runs)")
SeedOption = typer.Option(None, "--seed", help="Override run.seed")


def _setup_logging(level: int) -> None:
    root = logging.getLogger("krflow")
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False


@app.callback()
def main_options(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Warnings and errors only"),
) -> None:
    """
    Numerical laboratory for the normalized Kähler-Ricci flow on toric Fano manifolds.
    """
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    _setup_logging(level)


def _load(config: Optional[Path], scenario: str, out: Optional[Path], seed: Optional[int]) -> RunConfig:
    cfg = load_config(config) if config is not None else RunConfig()
    cfg = replace(cfg, run=replace(cfg.run, scenario=scenario))
    cfg = cfg.with_overrides(out=out, seed=seed)
    cfg.validate()
    return cfg


def _report(result: ScenarioResult) -> None:
    table = Table(title=f"{result.scenario} – {result.run_dir.root.name}", caption=str(result.run_dir.root))
    table.add_column("Gate", no_wrap=True)
    table.add_column("Result", no_wrap=True)
    for name, ok in result.gates.items():
        table.add_row(name, "[green]pass[/green]" if ok else "[red]fail[/red]")
    if not result.gates:
        table.add_row("-", "-")
    console.print(table)
    verdict = result.summary.get("verdict", "-")
    console.print(f"verdict: [bold]{verdict}[/bold]  exit code: {result.exit_code}")


def _execute(cfg: RunConfig, resume: Optional[Path] = None) -> None:
    try:
        result = run_scenario(cfg, resume=resume)
    except KRFlowError as e:
        console.print(f"[red]{type(e).__name__}:[/red] {e}")
        raise typer.Exit(code=EXIT_ABORTED)
    _report(result)
    raise typer.Exit(code=result.exit_code)


def _scenario(name: str, config: Optional[Path], out: Optional[Path], seed: Optional[int]) -> RunConfig:
    try:
        return _load(config, name, out, seed)
    except KRFlowError as e:
        console.print(f"[red]{type(e).__name__}:[/red] {e}")
        raise typer.Exit(code=EXIT_ABORTED)


@app.command("run-flow")
def cmd_run_flow(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    resume: Optional[Path] = typer.Option(None, "--resume", help="Continue from a checkpoint file"),
) -> None:
    """
    Integrate the flow, write the monitor and functional ledgers, and report convergence gates.
    """
    _execute(_scenario("run-flow", config, out, seed), resume=resume)


@app.command("tyzc-scan")
def cmd_tyzc_scan(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
) -> None:
    """
    Density-of-states expansion residuals over m and along a flow.
    """
    _execute(_scenario("tyzc-scan", config, out, seed))


@app.command("stability-probe")
def cmd_stability_probe(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
) -> None:
    """
    L~_m profiles along seeded diagonal one-parameter subgroups.
    """
    _execute(_scenario("stability-probe", config, out, seed))


@app.command("functional-audit")
def cmd_functional_audit(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
) -> None:
    """
    Cocycle, positivity, path-independence and shift-invariance checks on random potentials.
    """
    _execute(_scenario("functional-audit", config, out, seed))


@app.command("decay-study")
def cmd_decay_study(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
) -> None:
    """
    Mabuchi energy slope along a long run: bounded or linearly decaying.
    """
    _execute(_scenario("decay-study", config, out, seed))


@app.command("resume")
def cmd_resume(checkpoint: Path = typer.Argument(..., help="checkpoints/latest.npz of a run-flow run")) -> None:
    """
    Continue a run-flow run from its checkpoint, using the configuration stored next to it.
    """
    run_root = checkpoint.expanduser().resolve().parent.parent
    stored = read_json(run_root / CONFIG_FILENAME, default=None)
    if not isinstance(stored, dict) or "config" not in stored:
        console.print(f"[red]No {CONFIG_FILENAME} found in {run_root}[/red]")
        raise typer.Exit(code=EXIT_ABORTED)
    try:
        cfg = RunConfig.from_dict(stored["config"])
    except KRFlowError as e:
        console.print(f"[red]{type(e).__name__}:[/red] {e}")
        raise typer.Exit(code=EXIT_ABORTED)
    _execute(cfg, resume=checkpoint)


@app.command("status")
def cmd_status(
    out: Optional[Path] = OutOption,
    json_out: bool = typer.Option(False, "--json", help="Output machine-readable JSON"),
) -> None:
    """
    List run directories under the artifact base with their verdicts.
    """
    records = list_runs(out)
    if json_out:
        payload = [
            {
                "run": r.root.name,
                "scenario": r.scenario,
                "config_hash": r.config_hash,
                "verdict": r.verdict,
                "exit_code": r.exit_code,
                "finished_at": r.finished_at,
            }
            for r in records
        ]
        console.print_json(json.dumps({"version": __version__, "runs": payload}))
        return
    if not records:
        console.print("[dim]No runs found.[/dim]")
        raise typer.Exit(code=0)
    table = Table(title=f"krflow v{__version__} runs")
    table.add_column("Run", no_wrap=True)
    table.add_column("Scenario", no_wrap=True)
    table.add_column("Hash", no_wrap=True)
    table.add_column("Verdict", no_wrap=True)
    table.add_column("Exit", no_wrap=True)
    table.add_column("Age", no_wrap=True)
    for r in records:
        age = elapsed_since(r.finished_at) if r.finished_at else "?"
        table.add_row(r.root.name, r.scenario, r.config_hash, r.verdict, str(r.exit_code), age)
    console.print(table)


def main() -> None:
    app()


if __name__ == "__main__":
    main()
