"""Normalized Kähler-Ricci flow in potential form on the log-affine chart."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import simpson, trapezoid
from scipy.sparse import identity
from scipy.sparse.linalg import splu
from scipy.stats import linregress

from .errors import ConvexityLossError, StepFailure
from .fields import (
    DEFAULT_RADII,
    EVEN,
    MetricFields,
    curvature_monitors,
    finite_differences,
    geometry_monitors,
    laplacian_matrix,
    metric_fields,
    perturbed_hessian,
)
from .geometry import Grid, PotentialField

logger = logging.getLogger(__name__)

GAMMA = 1.0 + 1.0 / math.sqrt(2.0)

LEDGER_COLUMNS = [
    "t",
    "sup_phidot",
    "sup_R",
    "inf_R",
    "diam",
    "kappa_hat",
    "sup_Rm",
    "Ln_Rm",
    "sup_DeltaR",
    "dirichlet_E",
]


@dataclass(frozen=True)
class FlowSettings:
    horizon: float = 20.0
    sample_every: float = 0.1
    dt0: float = 1e-3
    dt_min: float = 1e-8
    dt_max: float = 0.05
    tolerance: float = 1e-6
    radii: Tuple[float, ...] = DEFAULT_RADII

    def sample_times(self) -> np.ndarray:
        count = int(round(self.horizon / self.sample_every))
        return self.sample_every * np.arange(count + 1)


def time_derivative(phi: PotentialField, reference: MetricFields, fields: Optional[MetricFields] = None) -> np.ndarray:
    """
    phidot = log(dmu_phi / dmu_omega) + (Phi - Phi_omega) - f_omega, which collapses to
    log det G + Phi - c_omega with c_omega the Ricci constant of the reference metric.
    """
    fields = fields if fields is not None else metric_fields(phi)
    return fields.logdet + phi.values() - reference.ricci_constant


def dirichlet_energy(fields: MetricFields, phidot: np.ndarray) -> float:
    """E = (1/V) ∫ |grad phidot|^2 dmu."""
    return fields.integrate_dx(fields.cofactor_pairing(phidot)) / fields.volume


@dataclass
class FlowState:
    t: float
    phi: PotentialField
    phidot: np.ndarray
    fields: MetricFields
    c_omega: float

    @property
    def u(self) -> np.ndarray:
        return self.phi.u

    @property
    def kappa(self) -> float:
        return self.phi.shift


def make_state(phi: PotentialField, t: float = 0.0, reference: Optional[MetricFields] = None) -> FlowState:
    """Flow state at phi; the reference metric defaults to phi's own (the flow's omega)."""
    fields = metric_fields(phi)
    reference = reference if reference is not None else fields
    phidot = time_derivative(phi, reference, fields)
    return FlowState(t=float(t), phi=phi, phidot=phidot, fields=fields, c_omega=reference.ricci_constant)


def residual(state: FlowState) -> float:
    """sup |cached phidot - phidot recomputed from phi|."""
    fields = metric_fields(state.phi)
    fresh = fields.logdet + state.phi.values() - state.c_omega
    return float(np.max(np.abs(fresh - state.phidot)))


class _Rhs:
    """u -> (phidot - mean, mean - kappa, G^{-1}) for a fixed base and Ricci constant."""

    def __init__(self, phi: PotentialField, c_omega: float):
        self.phi = phi.ungauged()
        self.grid = phi.grid
        self.fd = finite_differences(phi.grid, EVEN)
        self.base = phi.base_derivatives
        self.ref_hess = phi.reference_derivatives["hess"]
        self.c_omega = c_omega

    def __call__(self, u: np.ndarray) -> Tuple[np.ndarray, float, np.ndarray]:
        hess, _, _ = perturbed_hessian(self.base["hess"], self.ref_hess, u, self.fd)
        _, logdet = np.linalg.slogdet(hess)
        f = logdet + self.base["value"] + u - self.c_omega
        w = np.exp(logdet) * self.grid.weights
        s = float(np.sum(f * w) / np.sum(w))
        return f - s, s, hess

    def rms(self, e: np.ndarray, hess: np.ndarray) -> float:
        w = np.linalg.det(hess) * self.grid.weights
        return float(np.sqrt(np.sum(e**2 * w) / np.sum(w)))


def _ros2(rhs: _Rhs, u: np.ndarray, kappa: float, dt: float) -> Tuple[np.ndarray, float, float]:
    """One ROS2 step with W = Delta_phi at u; the gauge kappa is advanced exactly."""
    f1, s1, hess = rhs(u)
    shape = u.shape
    lap = laplacian_matrix(rhs.grid, np.linalg.inv(hess), EVEN)
    lu = splu((identity(u.size, format="csc") - GAMMA * dt * lap).tocsc())
    k1 = lu.solve(f1.ravel()).reshape(shape)
    f2, s2, _ = rhs(u + dt * k1)
    k2 = lu.solve((f2 - 2.0 * k1).ravel()).reshape(shape)
    u_new = u + dt * (1.5 * k1 + 0.5 * k2)
    grow = math.exp(dt)
    kappa_new = grow * kappa + (grow - 1.0) * 0.5 * (s1 + s2)
    err = rhs.rms(0.5 * dt * (k1 + k2), hess)
    return u_new, kappa_new, err


def step(state: FlowState, dt: float) -> FlowState:
    """Advance by exactly one ROS2 step of size dt."""
    rhs = _Rhs(state.phi, state.c_omega)
    try:
        u_new, kappa_new, _ = _ros2(rhs, state.u, state.kappa, dt)
        phi = state.phi.with_u(u_new, kappa_new)
        fields = metric_fields(phi)
    except ConvexityLossError as e:
        raise StepFailure(state.t, dt, str(e)) from e
    phidot = fields.logdet + phi.values() - state.c_omega
    return FlowState(t=state.t + dt, phi=phi, phidot=phidot, fields=fields, c_omega=state.c_omega)


@dataclass
class FlowSample:
    t: float
    u: np.ndarray
    kappa: float
    phidot: np.ndarray
    logdet: np.ndarray


@dataclass
class IntegratorState:
    t: float
    u: np.ndarray
    kappa: float
    dt: float
    sample_index: int
    accepted: int = 0
    rejected: int = 0


@dataclass
class FlowTrajectory:
    """Samples of a flow run with its monitor ledger and step log."""

    initial: PotentialField
    c_omega: float
    f_mean: float
    samples: List[FlowSample] = field(default_factory=list)
    rows: List[Dict[str, float]] = field(default_factory=list)
    steps: List[Dict[str, float]] = field(default_factory=list)
    converged: bool = True
    aborted: Optional[str] = None

    @property
    def grid(self) -> Grid:
        return self.initial.grid

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.samples])

    def potential(self, i: int) -> PotentialField:
        s = self.samples[i]
        return self.initial.with_u(s.u, s.kappa)

    def fields(self, i: int) -> MetricFields:
        return metric_fields(self.potential(i))

    def ledger(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LEDGER_COLUMNS)

    def step_log(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps, columns=["t", "dt", "error", "accepted"])

    def append(self, sample: FlowSample, row: Dict[str, float]) -> None:
        if self.samples and sample.t <= self.samples[-1].t:
            raise ValueError("sample times must increase")
        self.samples.append(sample)
        self.rows.append(row)


def _monitor_row(t: float, fields: MetricFields, phidot: np.ndarray, radii: Sequence[float]) -> Dict[str, float]:
    curv = curvature_monitors(fields)
    geo = geometry_monitors(fields, radii)
    r = fields.scalar_curvature[fields.resolved]
    return {
        "t": t,
        "sup_phidot": fields.sup(phidot),
        "sup_R": float(np.max(np.abs(r))),
        "inf_R": float(np.min(r)),
        "diam": geo.diameter,
        "kappa_hat": geo.kappa_hat,
        "sup_Rm": curv.sup_rm,
        "Ln_Rm": curv.ln_rm,
        "sup_DeltaR": curv.sup_delta_r,
        "dirichlet_E": dirichlet_energy(fields, phidot),
    }


def _record(traj: FlowTrajectory, t: float, u: np.ndarray, kappa: float, radii: Sequence[float]) -> None:
    phi = traj.initial.with_u(u, kappa)
    fields = metric_fields(phi)
    phidot = fields.logdet + phi.values() - traj.c_omega
    traj.append(
        FlowSample(t=t, u=u.copy(), kappa=float(kappa), phidot=phidot, logdet=fields.logdet.copy()),
        _monitor_row(t, fields, phidot, radii),
    )


def start(initial: PotentialField, settings: FlowSettings) -> Tuple[FlowTrajectory, IntegratorState]:
    """Trajectory with its t = 0 sample, and the integrator state to continue from."""
    if settings.horizon <= 0:
        raise ValueError("horizon must be positive")
    ref = metric_fields(initial)
    f_mean = ref.mean(ref.ricci_potential)
    traj = FlowTrajectory(initial=initial, c_omega=ref.ricci_constant, f_mean=f_mean)
    _record(traj, 0.0, initial.u, initial.shift, settings.radii)
    state = IntegratorState(t=0.0, u=initial.u.copy(), kappa=initial.shift, dt=settings.dt0, sample_index=1)
    return traj, state


def run(
    initial: PotentialField,
    settings: FlowSettings,
    resume: Optional[Tuple[FlowTrajectory, IntegratorState]] = None,
    on_sample: Optional[Callable[[FlowTrajectory, IntegratorState], None]] = None,
) -> FlowTrajectory:
    """
    Integrate from `initial` to the horizon, sampling at the configured cadence.
    A step failure below dt_min ends the run with a partial trajectory flagged non-converged.
    """
    traj, st = resume if resume is not None else start(initial, settings)
    rhs = _Rhs(traj.initial, traj.c_omega)
    times = settings.sample_times()
    dt = st.dt
    t, u, kappa = st.t, st.u, st.kappa
    while st.sample_index < len(times):
        target = float(times[st.sample_index])
        h = min(dt, settings.dt_max, target - t)
        clipped = h < min(dt, settings.dt_max)
        try:
            u_new, kappa_new, err = _ros2(rhs, u, kappa, h)
        except ConvexityLossError as e:
            st.rejected += 1
            dt = 0.5 * h
            logger.warning("t=%.4f: convexity lost with dt=%.3e (%s); halving", t, h, e)
            traj.steps.append({"t": t, "dt": h, "error": float("inf"), "accepted": False})
            if dt < settings.dt_min:
                return _abort(traj, StepFailure(t, h, str(e)))
            continue
        accepted = err <= settings.tolerance
        traj.steps.append({"t": t, "dt": h, "error": err, "accepted": accepted})
        factor = 2.0 if err == 0 else min(2.0, max(0.2, 0.9 * math.sqrt(settings.tolerance / err)))
        if accepted:
            st.accepted += 1
            t = t + h
            if clipped or target - t <= 1e-12 * max(1.0, target):
                t = target
            u, kappa = u_new, kappa_new
            dt = max(dt, factor * h) if clipped else factor * h
            if t >= target:
                _record(traj, t, u, kappa, settings.radii)
                st.sample_index += 1
                row = traj.rows[-1]
                logger.info("t=%.3f sup|phidot|=%.3e E=%.3e dt=%.2e", t, row["sup_phidot"], row["dirichlet_E"], dt)
                st.t, st.u, st.kappa, st.dt = t, u, kappa, min(dt, settings.dt_max)
                if on_sample is not None:
                    on_sample(traj, st)
        else:
            st.rejected += 1
            dt = factor * h
            if dt < settings.dt_min:
                return _abort(traj, StepFailure(t, h, f"error {err:.3e} above tolerance"))
        dt = min(dt, settings.dt_max)
    st.t, st.u, st.kappa, st.dt = t, u, kappa, dt
    return traj


def _abort(traj: FlowTrajectory, failure: StepFailure) -> FlowTrajectory:
    logger.warning("flow aborted: %s", failure)
    traj.converged = False
    traj.aborted = str(failure)
    return traj


def gauge_shift(traj: FlowTrajectory, c: float) -> FlowTrajectory:
    """Trajectory of phi_t + c e^t; metric monitors are unchanged, phidot shifts by c e^t."""
    if c == 0:
        return traj
    samples = []
    rows = []
    for i, (s, row) in enumerate(zip(traj.samples, traj.rows)):
        shift = c * math.exp(s.t)
        phidot = s.phidot + shift
        samples.append(replace(s, kappa=s.kappa + shift, phidot=phidot))
        rows.append({**row, "sup_phidot": traj.fields(i).sup(phidot)})
    initial = traj.initial.shifted(c)
    return replace(traj, initial=initial, samples=samples, rows=rows)


def gauge_endpoint(traj: FlowTrajectory) -> float:
    """-e^{-T} times the dmu_T-mean of phidot at the last sample; shifting by it centres phidot at T."""
    s = traj.samples[-1]
    w = np.exp(s.logdet) * traj.grid.weights
    return -math.exp(-s.t) * float(np.sum(s.phidot * w) / np.sum(w))


MONITOR_GROWTH = 10.0
MONITOR_FLOOR = 1e-8


def bounded_growth(values: Sequence[float], factor: float = MONITOR_GROWTH, floor: float = MONITOR_FLOOR) -> bool:
    """True when values are finite and the last third never exceeds factor times the first-third max plus floor."""
    v = np.abs(np.asarray(values, dtype=float))
    if len(v) == 0 or not np.all(np.isfinite(v)):
        return False
    third = max(1, len(v) // 3)
    return bool(np.max(v[-third:]) <= factor * np.max(v[:third]) + floor)


def bounded_below(values: Sequence[float], factor: float = MONITOR_GROWTH) -> bool:
    """True when the last-third minimum stays above the first-third minimum divided by factor."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0 or not np.all(np.isfinite(v)):
        return False
    third = max(1, len(v) // 3)
    return bool(np.min(v[-third:]) >= np.min(v[:third]) / factor and np.min(v) > 0)


@dataclass(frozen=True)
class NormalizationConstant:
    value: float
    error: float
    f_mean: float
    integral: float
    tail: float
    rate: float
    flagged: bool
    gauge: float = float("nan")


def normalization_constant(traj: FlowTrajectory, f_mean: Optional[float] = None) -> NormalizationConstant:
    """
    phi0* = (1/V) ∫ f_omega dmu_omega + ∫_0^T e^{-t} E dt + tail, where the tail extrapolates
    a fitted E ~ A e^{-r t} over the last third of the run.

    `gauge` is the same constant read from the endpoint, gauge_endpoint + tail, which is
    exact for the discrete trajectory; |value - gauge| is part of the error.
    """
    f_mean = traj.f_mean if f_mean is None else f_mean
    frame = traj.ledger()
    t = frame["t"].to_numpy()
    energy = frame["dirichlet_E"].to_numpy()
    weighted = np.exp(-t) * energy
    integral = float(trapezoid(weighted, t)) if len(t) > 1 else 0.0
    quad_err = abs(integral - float(simpson(weighted, x=t))) if len(t) > 2 else 0.0
    horizon = float(t[-1]) if len(t) else 0.0

    tail, rate, flagged = 0.0, float("nan"), False
    if len(t) and energy.max() > 1e-24:
        last = t >= t[0] + (2.0 / 3.0) * (horizon - t[0])
        ok = last & (energy > 0)
        if ok.sum() >= 3:
            fit = linregress(t[ok], np.log(energy[ok]))
            rate = -float(fit.slope)
            if rate > -1.0 and np.isfinite(fit.intercept):
                tail = math.exp(fit.intercept) * math.exp(-(1.0 + rate) * horizon) / (1.0 + rate)
                flagged = rate <= 0.0
            else:
                flagged = True
        else:
            flagged = True
    value = f_mean + integral + (tail if np.isfinite(tail) else 0.0)
    gauge = gauge_endpoint(traj) + (tail if np.isfinite(tail) else 0.0) if traj.samples else float("nan")
    error = float("inf") if flagged else abs(tail) + quad_err + abs(value - gauge)
    return NormalizationConstant(
        value=value,
        error=error,
        f_mean=f_mean,
        integral=integral,
        tail=tail,
        rate=rate,
        flagged=flagged,
        gauge=gauge,
    )


def fit_decay_rate(times: Sequence[float], values: Sequence[float]) -> float:
    """gamma with values ~ A e^{-gamma t} over the second half of the samples; nan if not fittable."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    keep = (t >= t[0] + 0.5 * (t[-1] - t[0])) & (v > 0) if len(t) else np.zeros(0, dtype=bool)
    if keep.sum() < 3:
        return float("nan")
    return -float(linregress(t[keep], np.log(v[keep])).slope)
