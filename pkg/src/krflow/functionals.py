"""Energy functionals F0, J, Mabuchi and L~_m, with their cross-checks along flows."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.integrate import cumulative_trapezoid
from scipy.stats import linregress

from .bergman import DEFAULT_TAIL_TOLERANCE, SectionBasis, density_of_states, gram_matrix, section_basis
from .fields import MetricFields, potential_hessian
from .flow import FlowTrajectory
from .geometry import PotentialField, reference_field

logger = logging.getLogger(__name__)

SIMPSON_NODES = (0.0, 0.5, 1.0)
SIMPSON_WEIGHTS = (1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0)


def _det(hess: np.ndarray) -> np.ndarray:
    if hess.shape[-1] == 1:
        return hess[..., 0, 0]
    return np.linalg.det(hess)


def f0_energy(phi: PotentialField, base: Optional[PotentialField] = None) -> float:
    """
    F0_base(phi) = -(1/V) ∫_0^1 ∫ v det((1-s) G_base + s G_phi) dx ds with v = Phi - Phi_base.

    The integrand is a polynomial of degree n <= 2 in s, so three Simpson nodes are exact.
    """
    base = base if base is not None else reference_field(phi.model, phi.grid)
    g0 = potential_hessian(base)
    g1 = potential_hessian(phi)
    v = phi.values() - base.values()
    grid = phi.grid
    volume = grid.integrate(_det(g0))
    total = 0.0
    for s, w in zip(SIMPSON_NODES, SIMPSON_WEIGHTS):
        total += w * grid.integrate(v * _det((1.0 - s) * g0 + s * g1))
    return -total / volume


def j_functional(phi: PotentialField, base: Optional[PotentialField] = None) -> float:
    """J_base(phi) = F0_base(phi) + (1/V) ∫ (Phi - Phi_base) dmu_base; nonnegative."""
    base = base if base is not None else reference_field(phi.model, phi.grid)
    det0 = _det(potential_hessian(base))
    v = phi.values() - base.values()
    mean = phi.grid.integrate(v * det0) / phi.grid.integrate(det0)
    return f0_energy(phi, base) + mean


def f0_along_path(path: Sequence[PotentialField]) -> float:
    """F0 from path[0] to path[-1] as the sum over consecutive straight segments."""
    if len(path) < 2:
        return 0.0
    return float(sum(f0_energy(b, a) for a, b in zip(path[:-1], path[1:])))


def cocycle_check(phi: PotentialField, psi: PotentialField, base: Optional[PotentialField] = None) -> float:
    """|F0_base(phi) - F0_base(psi) - F0_psi(phi)|."""
    base = base if base is not None else reference_field(phi.model, phi.grid)
    return abs(f0_energy(phi, base) - f0_energy(psi, base) - f0_energy(phi, psi))


def mabuchi_rate(fields: MetricFields, phidot: np.ndarray) -> float:
    """
    dM/dt = -(1/V) ∫ (phidot - mean)(R - n) dmu with R - n = -Delta(log det G + Phi), integrated
    by parts to -(1/V) ∫ cof(G)(D phidot, D(log det G + Phi)) dx. Boundary fluxes cancel only
    for the sum, not for log det G alone.
    """
    ricci_form = fields.logdet + fields.potential.values()
    return -fields.integrate_dx(fields.cofactor_pairing(phidot, ricci_form)) / fields.volume


def mabuchi_rate_pointwise(fields: MetricFields, phidot: np.ndarray) -> float:
    """The same rate from the pointwise scalar curvature, restricted to the resolved region."""
    dev = phidot - fields.mean(phidot)
    integrand = np.where(fields.resolved, dev * (fields.scalar_curvature - fields.dimension), 0.0)
    return -fields.integrate(integrand) / fields.volume


def mabuchi_energy(traj: FlowTrajectory) -> pd.DataFrame:
    """M along the flow path by time quadrature of its rate, normalized so M(t_0) = 0."""
    rates = []
    for i, sample in enumerate(traj.samples):
        rates.append(mabuchi_rate(traj.fields(i), sample.phidot))
    t = traj.times
    rates_arr = np.asarray(rates)
    m = cumulative_trapezoid(rates_arr, t, initial=0.0) if len(t) > 1 else np.zeros(len(t))
    return pd.DataFrame({"t": t, "M": m, "dM_dt": rates_arr})


def l_tilde(
    phi: PotentialField,
    m: int,
    base: Optional[PotentialField] = None,
    basis: Optional[SectionBasis] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> float:
    """
    L~_m(phi) = (c_phi - c_base) / N_m - m F0_base(phi).

    Both potentials are evaluated with their scalar gauge removed, which L~_m does not see.
    """
    base = (base if base is not None else reference_field(phi.model, phi.grid)).ungauged()
    phi = phi.ungauged()
    basis = basis if basis is not None else section_basis(phi.model, m)
    c_phi = gram_matrix(phi, m, basis=basis, tail_tolerance=tail_tolerance).c
    c_base = gram_matrix(base, m, basis=basis, tail_tolerance=tail_tolerance).c
    return (c_phi - c_base) / basis.size - m * f0_energy(phi, base)


def l_tilde_rate(fields: MetricFields, phidot: np.ndarray, rho: np.ndarray, m: int, n_sections: int) -> float:
    """
    dL~_m/dt = (1/N_m) ∫ phidot (Delta rho - m rho + m N_m / V) dmu, with the Laplacian
    term integrated by parts and phidot replaced by its mean-free part.
    """
    dev = phidot - fields.mean(phidot)
    lap_term = -fields.integrate_dx(fields.cofactor_pairing(dev, rho))
    return (lap_term - m * fields.integrate(dev * rho) + m * n_sections / fields.volume * fields.integrate(dev)) / (
        n_sections
    )


def ledger_derivative(t: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Centered second-order differences with one-sided second-order ends."""
    if len(t) < 3:
        return np.gradient(values, t) if len(t) > 1 else np.zeros_like(values)
    return np.gradient(values, t, edge_order=2)


@dataclass
class FunctionalLedger:
    frame: pd.DataFrame
    details: pd.DataFrame
    ms: List[int]

    def column(self, name: str, m: Optional[int] = None) -> np.ndarray:
        key = name if m is None else f"{name}_{m}"
        return self.frame[key].to_numpy()


def ledger_columns(ms: Sequence[int]) -> List[str]:
    cols = ["t", "F0", "J", "M", "dM_dt"]
    for m in ms:
        cols += [f"c_phi_{m}", f"Ltilde_{m}", f"dLtilde_dt_fd_{m}", f"dLtilde_dt_an_{m}", f"drift_{m}"]
    return cols


def functional_ledger(
    traj: FlowTrajectory,
    ms: Sequence[int],
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> FunctionalLedger:
    """F0, J, M, c_phi, L~_m and both derivative forms at every sample, relative to the flow's start."""
    base = traj.initial.ungauged()
    bases = {m: section_basis(base.model, m) for m in ms}
    c_base = {m: gram_matrix(base, m, basis=bases[m], tail_tolerance=tail_tolerance).c for m in ms}
    rows: List[Dict[str, float]] = []
    details: List[Dict[str, float]] = []
    for i, sample in enumerate(traj.samples):
        phi = traj.potential(i)
        flat = phi.ungauged()
        fields = traj.fields(i)
        f0 = f0_energy(flat, base)
        row: Dict[str, float] = {
            "t": sample.t,
            "F0": f0,
            "J": j_functional(flat, base),
            "dM_dt": mabuchi_rate(fields, sample.phidot),
        }
        dev = sample.phidot - fields.mean(sample.phidot)
        sup_r_dev = fields.sup(fields.scalar_curvature - fields.dimension)
        for m in ms:
            dos = density_of_states(flat, m, fields=fields, basis=bases[m], tail_tolerance=tail_tolerance)
            n_m = dos.n_sections
            c_phi = dos.gram.c
            row[f"c_phi_{m}"] = c_phi
            row[f"Ltilde_{m}"] = (c_phi - c_base[m]) / n_m - m * f0
            row[f"dLtilde_dt_an_{m}"] = l_tilde_rate(fields, sample.phidot, dos.rho, m, n_m)
            n = fields.dimension
            scale = float(m) ** (n - 1)
            resid = (dos.rho - m**n - 0.5 * fields.scalar_curvature * scale) / scale
            details.append(
                {
                    "t": sample.t,
                    "m": m,
                    "dimension": n,
                    "n_sections": n_m,
                    "volume": fields.volume,
                    "sup_phidot_dev": float(np.max(np.abs(dev))),
                    "sup_delta_rho": fields.sup(fields.laplacian(dos.rho)),
                    "eps_m": fields.sup(resid),
                    "sup_R_dev": sup_r_dev,
                }
            )
        rows.append(row)
        logger.debug("functional ledger sample t=%.3f done", sample.t)

    frame = pd.DataFrame(rows)
    t = frame["t"].to_numpy()
    frame["M"] = cumulative_trapezoid(frame["dM_dt"].to_numpy(), t, initial=0.0) if len(t) > 1 else 0.0
    for m in ms:
        frame[f"dLtilde_dt_fd_{m}"] = ledger_derivative(t, frame[f"Ltilde_{m}"].to_numpy())
        frame[f"drift_{m}"] = frame[f"dLtilde_dt_an_{m}"] - 0.5 * frame["dM_dt"]
    return FunctionalLedger(frame=frame[ledger_columns(ms)], details=pd.DataFrame(details), ms=list(ms))


@dataclass
class VariationCheck:
    m: int
    frame: pd.DataFrame
    max_relative: float
    max_relative_coarse: float
    order: float


def l_tilde_variation_check(ledger: FunctionalLedger, m: int) -> VariationCheck:
    """
    Finite-difference vs analytic dL~_m/dt; the observed order compares the full
    cadence with every second sample.
    """
    t = ledger.column("t")
    values = ledger.column("Ltilde", m)
    analytic = ledger.column("dLtilde_dt_an", m)
    fd = ledger.column("dLtilde_dt_fd", m)
    scale = max(float(np.max(np.abs(analytic))), 1e-300)
    fine = np.abs(fd - analytic) / scale
    coarse_fd = ledger_derivative(t[::2], values[::2])
    coarse = np.abs(coarse_fd - analytic[::2]) / scale
    # interior samples only: one-sided ends converge at the same order but with larger constants
    fine_max = float(np.max(fine[1:-1])) if len(fine) > 2 else float(np.max(fine, initial=0.0))
    coarse_max = float(np.max(coarse[1:-1])) if len(coarse) > 2 else float(np.max(coarse, initial=0.0))
    if fine_max > 0 and coarse_max > 0:
        order = float(np.log2(coarse_max / fine_max))
    else:
        order = float("nan")
    frame = pd.DataFrame({"t": t, "fd": fd, "analytic": analytic, "relative_residual": fine})
    return VariationCheck(m=m, frame=frame, max_relative=fine_max, max_relative_coarse=coarse_max, order=order)


def drift_bound(details: pd.DataFrame, m: int) -> pd.DataFrame:
    """
    Predicted bounds on |d/dt (L~_m - M/2)| from measured ingredients:

    rigorous: sup|phidot'| (V/N sup|Delta rho| + V m^n/N eps_m + |1 - V m^n/N| sup|R - n| / 2)
    asymptotic form: 2 sup|phidot'| (2 eps_m + C0/m)
    """
    d = details[details["m"] == m]
    n_sections = d["n_sections"].to_numpy(dtype=float)
    volume = d["volume"].to_numpy()
    n = _dimension_from(details)
    ratio = volume * float(m) ** n / n_sections
    rigorous = d["sup_phidot_dev"].to_numpy() * (
        volume / n_sections * d["sup_delta_rho"].to_numpy()
        + ratio * d["eps_m"].to_numpy()
        + 0.5 * np.abs(1.0 - ratio) * d["sup_R_dev"].to_numpy()
    )
    c0 = riemann_roch_remainder(n_sections[0], volume[0], m, n) if len(d) else float("nan")
    asymptotic = 2.0 * d["sup_phidot_dev"].to_numpy() * (2.0 * d["eps_m"].to_numpy() + c0 / m)
    return pd.DataFrame({"t": d["t"].to_numpy(), "predicted": rigorous, "predicted_asymptotic": asymptotic})


def _dimension_from(details: pd.DataFrame) -> int:
    return int(details["dimension"].iloc[0])


def riemann_roch_remainder(n_sections: float, volume: float, m: int, n: int) -> float:
    """C0 = m |N_m / (V m^{n-1}) - (m + n/2)|."""
    return float(m * abs(n_sections / (volume * float(m) ** (n - 1)) - (m + 0.5 * n)))


def drift_check(ledger: FunctionalLedger) -> pd.DataFrame:
    """Per m: max_t measured drift, max_t predicted bound and whether the bound held at every sample."""
    rows = []
    for m in ledger.ms:
        measured = np.abs(ledger.column("drift", m))
        bound = drift_bound(ledger.details, m)
        rows.append(
            {
                "m": m,
                "max_drift": float(np.max(measured)),
                "max_predicted": float(np.max(bound["predicted"])),
                "max_predicted_asymptotic": float(np.max(bound["predicted_asymptotic"])),
                "bound_holds": bool(np.all(measured <= bound["predicted"].to_numpy() * (1 + 1e-9) + 1e-12)),
            }
        )
    return pd.DataFrame(rows, columns=["m", "max_drift", "max_predicted", "max_predicted_asymptotic", "bound_holds"])


def measured_constants(traj: FlowTrajectory, ledger: FunctionalLedger) -> Dict[str, float]:
    """C0 per m (Riemann-Roch remainder), C1 = sup |Delta R|, C2 = sup |phidot| over the run."""
    frame = traj.ledger()
    out: Dict[str, float] = {
        "C1_sup_DeltaR": float(frame["sup_DeltaR"].max()),
        "C2_sup_phidot": float(frame["sup_phidot"].max()),
    }
    n = traj.grid.dimension
    for m in ledger.ms:
        d = ledger.details[ledger.details["m"] == m].iloc[0]
        out[f"C0_{m}"] = riemann_roch_remainder(d["n_sections"], d["volume"], m, n)
    return out


@dataclass(frozen=True)
class DecayVerdict:
    slope: float
    intercept: float
    gamma: float
    verdict: str


def decay_detector(t: Sequence[float], mabuchi: Sequence[float], threshold: float = 1e-3) -> DecayVerdict:
    """
    Fit M = a + b t over the last half. Verdicts: "bounded" if |b| < threshold,
    "linear-decay" if b <= -threshold, "increasing" if b >= threshold. M is non-increasing
    along the flow, so "increasing" flags a broken run rather than a stability verdict.
    """
    t_arr = np.asarray(t, dtype=float)
    m_arr = np.asarray(mabuchi, dtype=float)
    keep = t_arr >= t_arr[0] + 0.5 * (t_arr[-1] - t_arr[0])
    if keep.sum() < 2:
        raise ValueError("decay fit needs at least two samples in the last half of the run")
    fit = linregress(t_arr[keep], m_arr[keep])
    slope = float(fit.slope)
    if abs(slope) < threshold:
        return DecayVerdict(slope=slope, intercept=float(fit.intercept), gamma=0.0, verdict="bounded")
    if slope <= -threshold:
        return DecayVerdict(slope=slope, intercept=float(fit.intercept), gamma=-slope, verdict="linear-decay")
    logger.warning("Mabuchi energy grows with slope %.3e over the last half of the run", slope)
    return DecayVerdict(slope=slope, intercept=float(fit.intercept), gamma=float("nan"), verdict="increasing")
