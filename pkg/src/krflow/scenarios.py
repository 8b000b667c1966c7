"""Scenario runners: each builds its inputs from a RunConfig, writes artifacts and evaluates gates."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import __version__
from .bergman import balanced_defect, density_of_states, dimension_audit, tyzc_scan, tyzc_uniformity
from .config import RunConfig
from .errors import ConfigError, ConvexityLossError, ModelError, QuadratureTailError
from .fields import CONVEXITY_FLOOR, RESOLVED_FRACTION, metric_fields
from .flow import (
    FlowTrajectory,
    IntegratorState,
    bounded_below,
    bounded_growth,
    fit_decay_rate,
    gauge_shift,
    normalization_constant,
    run,
    start,
)
from .functionals import (
    DecayVerdict,
    cocycle_check,
    decay_detector,
    drift_check,
    f0_along_path,
    f0_energy,
    functional_ledger,
    j_functional,
    l_tilde,
    l_tilde_variation_check,
    mabuchi_energy,
    measured_constants,
)
from .geometry import (
    Grid,
    PotentialField,
    ToricModel,
    build_model,
    get_model,
    load_polytope_file,
    make_perturbation,
    perturbed_field,
    reference_field,
)
from .stability import DiagonalGroupElement, orthonormal_basis, psi_potential, random_weights, ray_probe
from .state import RunDirectory, load_checkpoint, save_checkpoint, write_csv, write_summary

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GATES_FAILED = 2
EXIT_ABORTED = 3

# models whose reference potential is Kähler-Einstein (and balanced at every m)
KAHLER_EINSTEIN_MODELS = ("cp1", "cp1xcp1", "cp2")

FIXED_POINT_TOLERANCE = 1e-8
CURVATURE_TOLERANCE = 1e-3
MONOTONE_TOLERANCE = 1e-10
VARIATION_TOLERANCE = 1e-3
TYZC_EXACT_TOLERANCE = 1e-6
TYZC_SLOPE = (-1.0, 0.2)
COCYCLE_TOLERANCE = 1e-8
J_FLOOR = -1e-10
PATH_TOLERANCE = 1e-6
SHIFT_TOLERANCE = 1e-10
JENSEN_TOLERANCE = 1e-8
SLACK_FLOOR = -1e-10
GAMMA_STABILITY = 0.2
HORIZON_CHECK = 0.2


@dataclass
class ScenarioResult:
    scenario: str
    run_dir: RunDirectory
    summary: Dict[str, Any]
    gates: Dict[str, bool] = field(default_factory=dict)
    aborted: bool = False

    @property
    def exit_code(self) -> int:
        if self.aborted:
            return EXIT_ABORTED
        return EXIT_OK if all(self.gates.values()) else EXIT_GATES_FAILED


# ---------------------------------------------------------------------------
# inputs


def resolve_model(cfg: RunConfig) -> ToricModel:
    if cfg.model.polytope:
        path = Path(cfg.model.polytope)
        polytope = load_polytope_file(path)
        if polytope.dimension > 2:
            raise ModelError(f"{path}: dimension {polytope.dimension} is not supported (n <= 2)")
        return build_model(polytope, cfg.model.m_max, name=path.stem)
    return get_model(cfg.model.name, m_max=cfg.model.m_max)


def make_grid(cfg: RunConfig, model: ToricModel) -> Grid:
    return Grid(half_width=cfg.grid.half_width, points_per_axis=cfg.grid.points, dimension=model.dimension)


def initial_potential(cfg: RunConfig, model: ToricModel, rng: np.random.Generator) -> PotentialField:
    grid = make_grid(cfg, model)
    p = cfg.perturbation
    return perturbed_field(model, grid, p.shape, amplitude=p.amplitude, width=p.width, count=p.count, rng=rng)


def _perturbed(cfg: RunConfig) -> bool:
    return cfg.perturbation.shape != "none" and cfg.perturbation.amplitude != 0


def _prepare(cfg: RunConfig, scenario: str) -> RunDirectory:
    out = Path(cfg.output.directory) if cfg.output.directory else None
    run_dir = RunDirectory.for_run(out, scenario, cfg.hash)
    run_dir.ensure_layout()
    run_dir.write_config(cfg.to_dict(), cfg.hash)
    logger.info("%s: run directory %s", scenario, run_dir.root)
    return run_dir


def _summary(cfg: RunConfig, scenario: str, model: ToricModel) -> Dict[str, Any]:
    return {
        "scenario": scenario,
        "config_hash": cfg.hash,
        "version": __version__,
        "model": model.name,
        "dimension": model.dimension,
        "seed": cfg.run.seed,
        "grid": {"half_width": cfg.grid.half_width, "points": cfg.grid.points},
        "tolerances": {
            "integrator": cfg.integrator.tolerance,
            "tail": cfg.bergman.tail_tolerance,
            "convexity_floor": CONVEXITY_FLOOR,
            "resolved_fraction": RESOLVED_FRACTION,
            "fixed_point": FIXED_POINT_TOLERANCE,
            "curvature": CURVATURE_TOLERANCE,
            "monotone": MONOTONE_TOLERANCE,
        },
    }


def _finish(result: ScenarioResult) -> ScenarioResult:
    result.summary["gates"] = result.gates
    result.summary["aborted"] = result.aborted
    result.summary["exit_code"] = result.exit_code
    write_summary(result.run_dir, result.summary)
    result.run_dir.mark_latest()
    failed = [k for k, ok in result.gates.items() if not ok]
    if failed:
        logger.warning("%s: gates failed: %s", result.scenario, ", ".join(failed))
    else:
        logger.info("%s: all %d gates pass", result.scenario, len(result.gates))
    return result


# ---------------------------------------------------------------------------
# flow


def monitors_bounded(ledger: pd.DataFrame) -> bool:
    """sup|phidot|, sup|R|, diameter and sup|Rm| without late growth, kappa_hat without collapse."""
    grows = [bounded_growth(ledger[col].to_numpy()) for col in ("sup_phidot", "sup_R", "diam", "sup_Rm")]
    return all(grows) and bounded_below(ledger["kappa_hat"].to_numpy())


def _curvature_deviation(traj: FlowTrajectory) -> np.ndarray:
    n = traj.grid.dimension
    out = []
    for i in range(len(traj.samples)):
        f = traj.fields(i)
        out.append(f.sup(f.scalar_curvature - n))
    return np.asarray(out)


def _integrate(
    cfg: RunConfig,
    run_dir: RunDirectory,
    initial: PotentialField,
    resume: Optional[Path] = None,
) -> FlowTrajectory:
    settings = cfg.flow_settings()
    total = len(settings.sample_times())
    every = cfg.run.checkpoint_every
    if resume is not None:
        state = load_checkpoint(Path(resume), cfg.hash, initial)
        logger.info("resuming from %s at t=%.3f", resume, state[1].t)
    else:
        state = start(initial, settings)
        save_checkpoint(run_dir.checkpoint_path, state[0], state[1], cfg.hash)

    def on_sample(traj: FlowTrajectory, st: IntegratorState) -> None:
        if (st.sample_index - 1) % every == 0 or st.sample_index == total:
            save_checkpoint(run_dir.checkpoint_path, traj, st, cfg.hash)

    traj = run(initial, settings, resume=state, on_sample=on_sample)
    if not traj.converged:
        # integrator state is only advanced at samples, so this resumes from the last one
        save_checkpoint(run_dir.checkpoint_path, traj, state[1], cfg.hash)
    return traj


def scenario_flow_run(cfg: RunConfig, resume: Optional[Path] = None) -> ScenarioResult:
    """Flow with monitors, functional ledger, normalization constant and convergence gates."""
    scenario = "run-flow"
    model = resolve_model(cfg)
    rng = np.random.default_rng(cfg.run.seed)
    initial = initial_potential(cfg, model, rng)
    run_dir = _prepare(cfg, scenario)

    traj = _integrate(cfg, run_dir, initial, resume=resume)
    ledger = traj.ledger()
    write_csv(run_dir, "trajectory.csv", ledger)
    write_csv(run_dir, "steps.csv", traj.step_log())

    dev = _curvature_deviation(traj)
    t = traj.times
    gamma = fit_decay_rate(t, dev)
    drift = float(np.max(np.abs(traj.potential(len(traj.samples) - 1).values() - initial.values())))

    summary = _summary(cfg, scenario, model)
    summary.update(
        {
            "horizon_reached": float(t[-1]),
            "converged": traj.converged,
            "aborted_reason": traj.aborted,
            "final_sup_R_dev": float(dev[-1]),
            "gamma_fit": gamma,
            "fixed_point_drift": drift,
            "monitors": {
                "max_sup_phidot": float(ledger["sup_phidot"].max()),
                "max_sup_R": float(ledger["sup_R"].max()),
                "max_diam": float(ledger["diam"].max()),
                "min_kappa_hat": float(ledger["kappa_hat"].min()),
                "max_sup_Rm": float(ledger["sup_Rm"].max()),
                "max_Ln_Rm": float(ledger["Ln_Rm"].max()),
                "final_dirichlet_E": float(ledger["dirichlet_E"].iloc[-1]),
            },
        }
    )
    gates: Dict[str, bool] = {
        "flow_converged": traj.converged,
        "dirichlet_nonnegative": bool(np.all(ledger["dirichlet_E"] >= -MONOTONE_TOLERANCE)),
    }

    monitors = ledger
    if traj.converged and len(traj.samples) > 2:
        fl = functional_ledger(traj, cfg.run.ms, tail_tolerance=cfg.bergman.tail_tolerance)
        write_csv(run_dir, "functionals.csv", fl.frame)
        drift_table = drift_check(fl) if cfg.run.ms else pd.DataFrame()
        write_csv(run_dir, "drift.csv", drift_table)
        variation = {m: l_tilde_variation_check(fl, m) for m in cfg.run.ms}
        phi0 = normalization_constant(traj)
        normalized = gauge_shift(traj, phi0.gauge)
        monitors = normalized.ledger()
        write_csv(run_dir, "trajectory_normalized.csv", monitors)
        summary["phi0_star"] = {
            "value": phi0.value,
            "error": phi0.error,
            "f_mean": phi0.f_mean,
            "integral": phi0.integral,
            "tail": phi0.tail,
            "rate": phi0.rate,
            "flagged": phi0.flagged,
            "gauge": phi0.gauge,
        }
        summary["monitors"]["max_sup_phidot_normalized"] = float(monitors["sup_phidot"].max())
        summary["constants"] = measured_constants(traj, fl)
        summary["variation"] = {
            str(m): {"max_relative": v.max_relative, "order": v.order} for m, v in variation.items()
        }
        gates["mabuchi_monotone"] = bool(np.all(fl.frame["dM_dt"] <= MONOTONE_TOLERANCE))
        if not drift_table.empty:
            gates["drift_bounded"] = bool(drift_table["bound_holds"].all())
            gates["drift_decreasing_in_m"] = bool(np.all(np.diff(drift_table["max_drift"].to_numpy()) <= 0))
        if _perturbed(cfg):
            gates["variation_audit"] = all(v.max_relative <= VARIATION_TOLERANCE for v in variation.values())
            gates["normalization_fit"] = not phi0.flagged

    gates["monitors_bounded"] = monitors_bounded(monitors)

    if _perturbed(cfg):
        gates["curvature_decay"] = bool(dev[-1] <= CURVATURE_TOLERANCE)
        gates["gamma_positive"] = bool(np.isfinite(gamma) and gamma > 0)
    else:
        gates["fixed_point_drift"] = drift <= FIXED_POINT_TOLERANCE

    if not traj.converged:
        verdict = "aborted"
    elif dev[-1] <= CURVATURE_TOLERANCE:
        verdict = "converged"
    else:
        verdict = "not-converged"
    summary["verdict"] = verdict
    result = ScenarioResult(scenario, run_dir, summary, gates, aborted=not traj.converged)
    return _finish(result)


# ---------------------------------------------------------------------------
# Bergman kernel scans


def _nearest_samples(traj: FlowTrajectory, times: Sequence[float]) -> List[int]:
    t = traj.times
    picks = [0]
    for target in times:
        if target <= t[-1] + 1e-12:
            i = int(np.argmin(np.abs(t - target)))
            if i not in picks:
                picks.append(i)
    return picks


def scenario_tyzc_scan(cfg: RunConfig) -> ScenarioResult:
    """Residual tables over m at the reference and at the perturbed metric, and along a flow."""
    scenario = "tyzc-scan"
    model = resolve_model(cfg)
    rng = np.random.default_rng(cfg.run.seed)
    initial = initial_potential(cfg, model, rng)
    reference = reference_field(model, initial.grid)
    run_dir = _prepare(cfg, scenario)
    ms = list(cfg.bergman.ms)
    tol = cfg.bergman.tail_tolerance

    audit = pd.DataFrame([asdict(dimension_audit(model, m)) for m in ms])
    write_csv(run_dir, "dimension_audit.csv", audit)

    ref_scan = tyzc_scan(reference, ms, t=None, tail_tolerance=tol)
    write_csv(run_dir, "tyzc_reference.csv", ref_scan.frame)
    ref_fields = metric_fields(reference)
    balance = []
    for m in ms:
        dos = density_of_states(reference, m, fields=ref_fields, tail_tolerance=tol)
        balance.append(
            {
                "m": m,
                "balanced_defect": balanced_defect(reference, m, fields=ref_fields),
                "integral_residual": abs(dos.integral / dos.n_sections - 1.0),
            }
        )
    balance_frame = pd.DataFrame(balance, columns=["m", "balanced_defect", "integral_residual"])
    write_csv(run_dir, "balance.csv", balance_frame)

    summary = _summary(cfg, scenario, model)
    gates: Dict[str, bool] = {
        "density_integral": bool(np.all(balance_frame["integral_residual"] <= 1e-8)),
    }
    if model.dimension == 1:
        gates["riemann_roch_exact"] = bool(np.all(np.abs(audit["deviation"]) < 1e-9))
    if model.name in KAHLER_EINSTEIN_MODELS:
        gates["reference_exact"] = bool(ref_scan.frame["sup_residual"].max() <= TYZC_EXACT_TOLERANCE)
        gates["reference_balanced"] = bool(balance_frame["balanced_defect"].max() <= TYZC_EXACT_TOLERANCE)

    if _perturbed(cfg):
        scan = tyzc_scan(initial, ms, t=0.0, tail_tolerance=tol)
        write_csv(run_dir, "tyzc_perturbed.csv", scan.frame)
        summary["slope"] = {"value": scan.slope, "intercept": scan.intercept, "stderr": scan.stderr}
        lo, hi = TYZC_SLOPE[0] - TYZC_SLOPE[1], TYZC_SLOPE[0] + TYZC_SLOPE[1]
        gates["tyzc_slope"] = bool(lo <= scan.slope <= hi)

        traj = run(initial, cfg.flow_settings())
        picks = _nearest_samples(traj, cfg.bergman.trajectory_times)
        along = tyzc_uniformity(
            [(traj.samples[i].t, traj.potential(i)) for i in picks], cfg.bergman.trajectory_m, tail_tolerance=tol
        )
        write_csv(run_dir, "tyzc_trajectory.csv", along)
        first = float(along["sup_residual"].iloc[0])
        ratio = float(along["sup_residual"].max() / first) if first > 0 else float("nan")
        summary["trajectory_ratio"] = ratio
        gates["trajectory_bounded"] = bool(np.all(np.isfinite(along["sup_residual"])) and ratio <= 2.0)

    summary["verdict"] = "pass" if all(gates.values()) else "fail"
    return _finish(ScenarioResult(scenario, run_dir, summary, gates))


# ---------------------------------------------------------------------------
# stability probe


def scenario_stability_probe(cfg: RunConfig) -> ScenarioResult:
    """Seeded random diagonal rays plus the identity ray; per-ray profiles and a minima table."""
    scenario = "stability-probe"
    model = resolve_model(cfg)
    rng = np.random.default_rng(cfg.run.seed)
    base = initial_potential(cfg, model, rng).ungauged()
    run_dir = _prepare(cfg, scenario)
    m = cfg.probe.m
    tol = cfg.bergman.tail_tolerance
    basis = orthonormal_basis(base, m, tail_tolerance=tol)
    s_grid = np.linspace(-cfg.probe.s_max, cfg.probe.s_max, cfg.probe.s_samples)

    rays = [np.zeros(basis.size)] + [random_weights(basis.size, rng) for _ in range(cfg.probe.rays)]
    minima = []
    profiles = []
    for i, weights in enumerate(rays):
        profile = ray_probe(weights, s_grid, m, base, basis=basis, tail_tolerance=tol)
        profiles.append(profile)
        write_csv(run_dir, f"ray_{i:02d}.csv", profile.frame)
        frame = profile.frame
        residual_cols = ["residual_l_tilde_split", "residual_unimodular_rescale", "residual_fs_cocycle"]
        minima.append(
            {
                "ray": i,
                "minimum": profile.minimum,
                "argmin": profile.argmin,
                "s_lo": profile.admissible[0],
                "s_hi": profile.admissible[1],
                "truncated": profile.truncated,
                "min_slack": profile.min_slack(),
                "max_chain_residual": float(frame[residual_cols].to_numpy().max()) if len(frame) else float("nan"),
                "max_jensen_residual": float(frame["jensen_residual"].max()) if len(frame) else float("nan"),
            }
        )
        logger.info("ray %d: min L~=%.6g at s=%.3f", i, profile.minimum, profile.argmin)
    table = pd.DataFrame(minima)
    write_csv(run_dir, "minima.csv", table)

    identity = profiles[0].frame["Ltilde"].to_numpy()
    scale_residual = _scale_invariance_residual(rays[1] if len(rays) > 1 else rays[0], m, base, basis, tol)
    summary = _summary(cfg, scenario, model)
    summary.update(
        {
            "m": m,
            "n_sections": basis.size,
            "weights": [w.tolist() for w in rays[1:]],
            "minima": table.to_dict(orient="records"),
            "scale_residual": scale_residual,
        }
    )
    gates = {
        "minima_finite": bool(np.all(np.isfinite(table["minimum"]))),
        "slacks_nonnegative": bool(table["min_slack"].min() >= SLACK_FLOOR),
        "jensen_identity": bool(table["max_jensen_residual"].max() <= JENSEN_TOLERANCE),
        "chain_equalities": bool(table["max_chain_residual"].max() <= JENSEN_TOLERANCE),
        "identity_ray_constant": bool(len(identity) and np.ptp(identity) <= SHIFT_TOLERANCE),
        "scale_invariance": bool(scale_residual <= SHIFT_TOLERANCE),
    }
    summary["verdict"] = "pass" if all(gates.values()) else "fail"
    return _finish(ScenarioResult(scenario, run_dir, summary, gates))


def _scale_invariance_residual(weights, m, base, basis, tol) -> float:
    """|L~(psi_tau) - L~(psi of the SL-normalized lambda tau)| for a unimodular ray at s = 1."""
    tau = DiagonalGroupElement(m=m, weights=np.asarray(weights, dtype=float), s=1.0)
    moved = tau.scaled(0.7).normalized()
    try:
        a = l_tilde(psi_potential(base, basis, tau), m, base=base, basis=basis, tail_tolerance=tol)
        b = l_tilde(psi_potential(base, basis, moved), m, base=base, basis=basis, tail_tolerance=tol)
    except (ConvexityLossError, QuadratureTailError) as e:
        logger.warning("scale invariance check skipped: %s", e)
        return float("nan")
    return abs(a - b)


# ---------------------------------------------------------------------------
# functional identities


def scenario_functional_audit(cfg: RunConfig) -> ScenarioResult:
    """Cocycle, J positivity, path independence and shift invariance on seeded random potentials."""
    scenario = "functional-audit"
    model = resolve_model(cfg)
    rng = np.random.default_rng(cfg.run.seed)
    grid = make_grid(cfg, model)
    base = reference_field(model, grid)
    run_dir = _prepare(cfg, scenario)
    p = cfg.perturbation
    m = cfg.probe.m
    tol = cfg.bergman.tail_tolerance

    def draw() -> PotentialField:
        u = make_perturbation(grid, "random", amplitude=p.amplitude, width=p.width, count=p.count, rng=rng)
        return base.with_u(u)

    rows = []
    skipped = 0
    for i in range(cfg.probe.audit_potentials):
        phi, psi, chi = draw(), draw(), draw()
        shift = float(rng.uniform(-1.0, 1.0))
        try:
            direct = f0_energy(phi, base)
            path = f0_along_path([base, psi, chi, phi])
            lt = l_tilde(phi, m, base=base, tail_tolerance=tol)
            lt_shift = l_tilde(phi.with_u(phi.u + shift), m, base=base, tail_tolerance=tol)
            rows.append(
                {
                    "index": i,
                    "cocycle": cocycle_check(phi, psi, base),
                    "J": j_functional(phi, base),
                    "path": abs(direct - path),
                    "shift": abs(lt_shift - lt),
                }
            )
        except (ConvexityLossError, QuadratureTailError) as e:
            skipped += 1
            logger.debug("audit potential %d skipped: %s", i, e)
    frame = pd.DataFrame(rows, columns=["index", "cocycle", "J", "path", "shift"])
    write_csv(run_dir, "audit.csv", frame)

    summary = _summary(cfg, scenario, model)
    summary.update(
        {
            "m": m,
            "potentials": len(frame),
            "skipped": skipped,
            "max_cocycle": float(frame["cocycle"].max()) if len(frame) else float("nan"),
            "min_J": float(frame["J"].min()) if len(frame) else float("nan"),
            "max_path": float(frame["path"].max()) if len(frame) else float("nan"),
            "max_shift": float(frame["shift"].max()) if len(frame) else float("nan"),
        }
    )
    gates = {
        "all_evaluated": skipped == 0,
        "cocycle": bool(len(frame) and frame["cocycle"].max() <= COCYCLE_TOLERANCE),
        "j_nonnegative": bool(len(frame) and frame["J"].min() >= J_FLOOR),
        "path_independence": bool(len(frame) and frame["path"].max() <= PATH_TOLERANCE),
        "shift_invariance": bool(len(frame) and frame["shift"].max() <= SHIFT_TOLERANCE),
    }
    summary["verdict"] = "pass" if all(gates.values()) else "fail"
    return _finish(ScenarioResult(scenario, run_dir, summary, gates))


# ---------------------------------------------------------------------------
# Mabuchi decay dichotomy


def scenario_decay_study(cfg: RunConfig) -> ScenarioResult:
    """Mabuchi slope fit, L~_m trend and drift table; non-convergence is recorded, not fatal."""
    scenario = "decay-study"
    if cfg.run.horizon < cfg.run.min_horizon:
        raise ConfigError(
            f"horizon T={cfg.run.horizon:g} is below the minimum {cfg.run.min_horizon:g} for a decay fit; "
            "increase run.horizon"
        )
    model = resolve_model(cfg)
    rng = np.random.default_rng(cfg.run.seed)
    initial = initial_potential(cfg, model, rng)
    run_dir = _prepare(cfg, scenario)

    settings = cfg.flow_settings()
    state = start(initial, settings)
    traj = run(initial, settings, resume=state)
    write_csv(run_dir, "trajectory.csv", traj.ledger())
    horizon = float(traj.times[-1])
    converged, aborted = traj.converged, traj.aborted
    if converged:
        # continue the same integrator state to 1.2 T for the longer-horizon check
        longer = replace(settings, horizon=(1.0 + HORIZON_CHECK) * settings.horizon)
        run(initial, longer, resume=state)
        write_csv(run_dir, "trajectory_extended.csv", traj.ledger())
    mabuchi = mabuchi_energy(traj)
    write_csv(run_dir, "mabuchi.csv", mabuchi)
    t_all = mabuchi["t"].to_numpy()
    values_all = mabuchi["M"].to_numpy()
    main = t_all <= horizon + 1e-9
    t, values = t_all[main], values_all[main]

    summary = _summary(cfg, scenario, model)
    summary.update(
        {
            "horizon_reached": float(t[-1]),
            "extended_horizon_reached": float(t_all[-1]),
            "converged": converged,
            "aborted_reason": aborted,
            "extension_converged": traj.converged if converged else False,
        }
    )
    gates: Dict[str, bool] = {}
    if len(t) < 4:
        summary["verdict"] = "insufficient-samples"
        gates["decay_fit"] = False
        return _finish(ScenarioResult(scenario, run_dir, summary, gates))

    threshold = cfg.run.decay_threshold
    verdict = decay_detector(t, values, threshold=threshold)
    shorter = t <= t[0] + (1.0 - HORIZON_CHECK) * (t[-1] - t[0])
    check_short = decay_detector(t[shorter], values[shorter], threshold=threshold)
    if t_all[-1] > t[-1]:
        check_long = decay_detector(t_all, values_all, threshold=threshold)
    else:
        check_long = None
    stability_short = _gamma_stability(verdict, check_short)
    stability_long = _gamma_stability(verdict, check_long) if check_long is not None else float("inf")
    summary.update(
        {
            "mabuchi_slope": verdict.slope,
            "gamma": verdict.gamma,
            "gamma_shorter_horizon": check_short.gamma,
            "gamma_longer_horizon": check_long.gamma if check_long is not None else float("nan"),
            "gamma_stability": max(stability_short, stability_long),
            "gamma_stability_shorter": stability_short,
            "gamma_stability_longer": stability_long,
            "verdict": verdict.verdict,
        }
    )

    try:
        fl = functional_ledger(traj, cfg.run.ms, tail_tolerance=cfg.bergman.tail_tolerance)
    except (QuadratureTailError, ConvexityLossError) as e:
        logger.warning("functional ledger unavailable: %s", e)
        summary["ledger_error"] = str(e)
    else:
        write_csv(run_dir, "functionals.csv", fl.frame)
        if cfg.run.ms:
            write_csv(run_dir, "drift.csv", drift_check(fl))
            summary["ltilde_trend"] = {
                str(m): float(_trend(fl.column("t"), fl.column("Ltilde", m))) for m in cfg.run.ms
            }

    expected = "bounded" if model.name in KAHLER_EINSTEIN_MODELS else "linear-decay"
    gates["verdict_expected"] = verdict.verdict == expected
    gates["gamma_stable"] = bool(stability_short <= GAMMA_STABILITY and stability_long <= GAMMA_STABILITY)
    return _finish(ScenarioResult(scenario, run_dir, summary, gates))


def _gamma_stability(verdict: DecayVerdict, check: DecayVerdict) -> float:
    """Relative change of the fitted rate between two horizons; 0 or inf when either fit has no rate."""
    if verdict.gamma > 0 and check.gamma > 0:
        return abs(check.gamma / verdict.gamma - 1.0)
    return 0.0 if verdict.verdict == check.verdict else float("inf")


def _trend(t: np.ndarray, values: np.ndarray) -> float:
    keep = np.isfinite(values)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(t[keep], values[keep], 1)[0])


# ---------------------------------------------------------------------------

SCENARIO_RUNNERS: Dict[str, Callable[..., ScenarioResult]] = {
    "run-flow": scenario_flow_run,
    "tyzc-scan": scenario_tyzc_scan,
    "stability-probe": scenario_stability_probe,
    "functional-audit": scenario_functional_audit,
    "decay-study": scenario_decay_study,
}


def run_scenario(cfg: RunConfig, resume: Optional[Path] = None) -> ScenarioResult:
    name = cfg.run.scenario
    if resume is not None:
        if name != "run-flow":
            raise ConfigError(f"--resume applies to run-flow only, not {name}")
        return scenario_flow_run(cfg, resume=resume)
    return SCENARIO_RUNNERS[name](cfg)

