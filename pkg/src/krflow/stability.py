"""Algebraic potentials along diagonal one-parameter subgroups and the L~_m lower-bound chain."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .bergman import (
    DEFAULT_TAIL_TOLERANCE,
    SectionBasis,
    density_of_states,
    fubini_study_potential,
    gram_matrix,
    orthonormal_basis,
)
from .errors import ConvexityLossError, QuadratureTailError
from .fields import metric_fields, potential_hessian
from .functionals import f0_energy, j_functional, l_tilde
from .geometry import LogSumExpPotential, PotentialField

logger = logging.getLogger(__name__)

ADMISSIBLE_RESOLUTION = 1e-3


@dataclass(frozen=True)
class DiagonalGroupElement:
    """tau = lambda * diag(e^{s a_alpha / 2}), indexed like the section basis."""

    m: int
    weights: np.ndarray
    s: float = 0.0
    log_scale: float = 0.0

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("group weights must be finite")

    @property
    def log_entries(self) -> np.ndarray:
        return self.log_scale + 0.5 * self.s * np.asarray(self.weights, dtype=float)

    @property
    def log_abs_det(self) -> float:
        return float(np.sum(self.log_entries))

    @property
    def unimodular(self) -> bool:
        return abs(self.log_abs_det) < 1e-10

    @property
    def trace_norm(self) -> float:
        """tr(tau^* tau)."""
        return float(np.exp(logsumexp(2.0 * self.log_entries)))

    def at(self, s: float) -> "DiagonalGroupElement":
        return replace(self, s=float(s))

    def scaled(self, log_lambda: float) -> "DiagonalGroupElement":
        return replace(self, log_scale=self.log_scale + float(log_lambda))

    def normalized(self) -> "DiagonalGroupElement":
        """(det tau)^{-1/N} tau, which lies in SL(N)."""
        return replace(self, log_scale=self.log_scale - self.log_abs_det / len(self.weights))

    def matrix(self) -> np.ndarray:
        return np.diag(np.exp(self.log_entries))


def psi_potential(base: PotentialField, basis: SectionBasis, tau: DiagonalGroupElement) -> PotentialField:
    """
    psi_tau = (1/m) log sum_alpha |tau_aa|^2 e^{<alpha,x>} / h_alpha, an exact log-sum-exp potential.
    With tau = identity this is the Fubini-Study potential of the embedding orthonormal at `basis`.
    """
    if len(tau.weights) != basis.size:
        raise ValueError(f"tau has {len(tau.weights)} entries, basis has {basis.size}")
    lse = LogSumExpPotential(points=basis.points, log_coeffs=2.0 * tau.log_entries - basis.log_norms, scale=1.0 / basis.m)
    return PotentialField(model=base.model, grid=base.grid, u=np.zeros(base.grid.shape), base=lse)


def fubini_study_field(base: PotentialField, basis: SectionBasis) -> PotentialField:
    return PotentialField(
        model=base.model, grid=base.grid, u=np.zeros(base.grid.shape), base=fubini_study_potential(basis)
    )


@dataclass
class AlgebraicPotential:
    tau: DiagonalGroupElement
    phi_tau: np.ndarray
    psi: PotentialField
    fubini_study: PotentialField
    log_rho_base: np.ndarray

    @property
    def psi_relative(self) -> np.ndarray:
        """psi_tau - phi_base = phi_tau + (1/m) log rho_m(base)."""
        return self.phi_tau + self.log_rho_base / self.tau.m


def algebraic_potential(
    tau: DiagonalGroupElement,
    base: PotentialField,
    basis: Optional[SectionBasis] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> AlgebraicPotential:
    """
    phi_tau = (1/m) [log sum e^{s a} w - log sum w] on the slice, w the orthonormalized section
    weights at the base, together with psi_tau and the Fubini-Study potential it is measured from.
    """
    m = tau.m
    basis = basis if basis is not None else orthonormal_basis(base, m, tail_tolerance=tail_tolerance)
    logw = basis.log_weights(base)
    log_rho = logsumexp(logw, axis=-1)
    phi_tau = (logsumexp(logw + 2.0 * tau.log_entries, axis=-1) - log_rho) / m
    return AlgebraicPotential(
        tau=tau,
        phi_tau=phi_tau,
        psi=psi_potential(base, basis, tau),
        fubini_study=fubini_study_field(base, basis),
        log_rho_base=log_rho,
    )


@dataclass(frozen=True)
class JensenCheck:
    integral: float
    expected: float
    relative_residual: float
    mean_lhs: float
    bound: float
    slack: float


def jensen_identity_check(
    tau: DiagonalGroupElement,
    phi: PotentialField,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> JensenCheck:
    """
    ∫ e^{m(psi_tau - phi)} dmu_phi = tr(tau^* tau) for the basis orthonormal at phi, and the
    Jensen consequence (m/V) ∫ (psi_tau - phi) dmu_phi <= log(tr(tau^* tau) / V).
    """
    m = tau.m
    fields = metric_fields(phi)
    basis = orthonormal_basis(phi, m, fields=fields, tail_tolerance=tail_tolerance)
    m_diff = logsumexp(basis.log_weights(phi) + 2.0 * tau.log_entries, axis=-1)
    integral = fields.integrate(np.exp(m_diff))
    expected = tau.trace_norm
    mean_lhs = fields.mean(m_diff)
    bound = math.log(expected / fields.volume)
    return JensenCheck(
        integral=integral,
        expected=expected,
        relative_residual=abs(integral / expected - 1.0),
        mean_lhs=mean_lhs,
        bound=bound,
        slack=bound - mean_lhs,
    )


@dataclass(frozen=True)
class AmgmCheck:
    c_over_n: float
    bound: float
    slack: float
    c_psi: float


def amgm_bound_check(
    tau: DiagonalGroupElement,
    base: PotentialField,
    basis: Optional[SectionBasis] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> AmgmCheck:
    """
    log det of the Gram matrix of the tau-transformed basis at psi_tau, over N_m, against
    log(V/N_m); the diagonal entries of that matrix sum to the volume.
    """
    m = tau.m
    basis = basis if basis is not None else orthonormal_basis(base, m, tail_tolerance=tail_tolerance)
    psi = psi_potential(base, basis, tau)
    fields = metric_fields(psi)
    moved = gram_matrix(psi, m, basis=basis.transformed(tau.matrix()), fields=fields, tail_tolerance=tail_tolerance)
    plain = gram_matrix(psi, m, basis=basis, fields=fields, tail_tolerance=tail_tolerance)
    n = basis.size
    bound = math.log(fields.volume / n)
    return AmgmCheck(c_over_n=moved.c / n, bound=bound, slack=bound - moved.c / n, c_psi=plain.c)


@dataclass
class ChainLinks:
    """Every link of the L~_m lower-bound argument at one potential."""

    l_tilde: float
    log_abs_det_tau: float
    jensen_integral: float
    n_sections: int
    residuals: Dict[str, float]
    slacks: Dict[str, float]


def chain_links(
    phi: PotentialField,
    m: int,
    base: PotentialField,
    base_basis: Optional[SectionBasis] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> ChainLinks:
    """
    Evaluate the chain at phi with tau the diagonal change from the basis orthonormal at
    `base` (omega) to the one orthonormal at phi; psi_tau is then the Fubini-Study
    potential of phi's own embedding.
    """
    base = base.ungauged()
    phi = phi.ungauged()
    base_basis = base_basis if base_basis is not None else orthonormal_basis(base, m, tail_tolerance=tail_tolerance)
    fields = metric_fields(phi)
    phi_basis = orthonormal_basis(phi, m, fields=fields, tail_tolerance=tail_tolerance)
    n = base_basis.size
    volume = fields.volume

    weights = base_basis.log_norms - phi_basis.log_norms
    tau = DiagonalGroupElement(m=m, weights=weights, s=1.0)
    log_det = tau.log_abs_det
    lt = l_tilde(phi, m, base=base, basis=base_basis, tail_tolerance=tail_tolerance)
    f0_phi = f0_energy(phi, base)

    psi = psi_potential(base, base_basis, tau)
    fs = fubini_study_field(base, base_basis)
    diff = psi.values() - phi.values()
    mean_diff = fields.mean(diff)
    jensen_integral = fields.integrate(np.exp(m * diff))
    f0_psi = f0_energy(psi, base)
    f0_phi_psi = f0_energy(psi, phi)
    j_phi_psi = j_functional(psi, phi)
    f0_fs_phitau = f0_energy(psi, fs)
    f0_fs_base = f0_energy(base, fs)
    c4 = math.log(n / volume) - m * f0_fs_base

    normalized = tau.normalized()
    psi_tilde = psi_potential(base, base_basis, normalized)
    f0_fs_phitilde = f0_energy(psi_tilde, fs)

    residuals = {
        "l_tilde_split": abs(lt - (-2.0 / n * log_det - m * f0_phi)),
        "f0_cocycle": abs((f0_phi - f0_psi) + f0_phi_psi),
        "unimodular_rescale": abs((-2.0 / n * log_det - m * f0_fs_phitau) - (-m * f0_fs_phitilde)),
        "fs_cocycle": abs(f0_fs_phitau - (f0_psi + f0_fs_base)),
        "jensen_identity": abs(jensen_integral / n - 1.0),
    }
    slacks = {
        "mean_vs_f0": mean_diff - (f0_phi - f0_psi),
        "jensen": math.log(n / volume) - m * mean_diff,
        "f0_gap": math.log(n / volume) / m - (f0_phi - f0_psi),
        "fs_comparison": (-m * f0_phi) - (-m * f0_fs_phitau - c4),
        "l_tilde_lower": lt - (-2.0 / n * log_det - m * f0_fs_phitau - c4),
        "j_nonneg": j_phi_psi,
    }
    return ChainLinks(
        l_tilde=lt,
        log_abs_det_tau=log_det,
        jensen_integral=jensen_integral,
        n_sections=n,
        residuals=residuals,
        slacks=slacks,
    )


def _admissible(base: PotentialField, basis: SectionBasis, tau: DiagonalGroupElement, tail_tolerance: float) -> bool:
    psi = psi_potential(base, basis, tau)
    try:
        potential_hessian(psi)
        gram_matrix(psi, tau.m, basis=basis, tail_tolerance=tail_tolerance)
    except (ConvexityLossError, QuadratureTailError):
        return False
    return True


def admissible_range(
    weights: np.ndarray,
    m: int,
    base: PotentialField,
    s_max: float = 3.0,
    basis: Optional[SectionBasis] = None,
    resolution: float = ADMISSIBLE_RESOLUTION,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> Tuple[float, float]:
    """Largest [s_lo, s_hi] within [-s_max, s_max] on which psi_tau stays convex and quadrature-admissible."""
    basis = basis if basis is not None else orthonormal_basis(base, m, tail_tolerance=tail_tolerance)
    tau = DiagonalGroupElement(m=m, weights=np.asarray(weights, dtype=float))

    def edge(sign: float) -> float:
        if _admissible(base, basis, tau.at(sign * s_max), tail_tolerance):
            return sign * s_max
        lo, hi = 0.0, s_max
        while hi - lo > resolution:
            mid = 0.5 * (lo + hi)
            if _admissible(base, basis, tau.at(sign * mid), tail_tolerance):
                lo = mid
            else:
                hi = mid
        return sign * lo

    return edge(-1.0), edge(1.0)


PROBE_COLUMNS = [
    "s",
    "Ltilde",
    "F0_phi_tau",
    "c_psi_tau",
    "jensen_slack",
    "amgm_slack",
    "slack_mean_vs_f0",
    "slack_f0_gap",
    "slack_fs_comparison",
    "slack_l_tilde_lower",
    "residual_l_tilde_split",
    "residual_unimodular_rescale",
    "residual_fs_cocycle",
    "jensen_residual",
    "log_det_tau",
]


@dataclass
class RayProfile:
    weights: np.ndarray
    frame: pd.DataFrame
    admissible: Tuple[float, float]
    truncated: int

    @property
    def minimum(self) -> float:
        return float(self.frame["Ltilde"].min()) if len(self.frame) else float("nan")

    @property
    def argmin(self) -> float:
        if not len(self.frame):
            return float("nan")
        return float(self.frame["s"].iloc[int(self.frame["Ltilde"].to_numpy().argmin())])

    def min_slack(self) -> float:
        cols = [c for c in self.frame.columns if c.endswith("slack") or c.startswith("slack_")]
        return float(self.frame[cols].to_numpy().min()) if len(self.frame) else float("nan")


def ray_probe(
    weights: np.ndarray,
    s_grid: Sequence[float],
    m: int,
    base: PotentialField,
    basis: Optional[SectionBasis] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> RayProfile:
    """L~_m(psi_tau(s)) and the chain quantities at each admissible s of the ray tau(s) = diag(e^{s a / 2})."""
    weights = np.asarray(weights, dtype=float)
    base = base.ungauged()
    basis = basis if basis is not None else orthonormal_basis(base, m, tail_tolerance=tail_tolerance)
    s_arr = np.asarray(list(s_grid), dtype=float)
    s_max = float(np.max(np.abs(s_arr))) if len(s_arr) else 0.0
    lo, hi = admissible_range(weights, m, base, s_max=s_max, basis=basis, tail_tolerance=tail_tolerance)
    rows: List[Dict[str, float]] = []
    truncated = 0
    for s in s_arr:
        if s < lo or s > hi:
            truncated += 1
            continue
        tau = DiagonalGroupElement(m=m, weights=weights, s=float(s))
        alg = algebraic_potential(tau, base, basis=basis)
        links = chain_links(alg.psi, m, base, base_basis=basis, tail_tolerance=tail_tolerance)
        jensen = jensen_identity_check(tau, base, tail_tolerance=tail_tolerance)
        amgm = amgm_bound_check(tau, base, basis=basis, tail_tolerance=tail_tolerance)
        rows.append(
            {
                "s": float(s),
                "Ltilde": links.l_tilde,
                "F0_phi_tau": f0_energy(alg.psi, alg.fubini_study),
                "c_psi_tau": amgm.c_psi,
                "jensen_slack": jensen.slack,
                "amgm_slack": amgm.slack,
                "slack_mean_vs_f0": links.slacks["mean_vs_f0"],
                "slack_f0_gap": links.slacks["f0_gap"],
                "slack_fs_comparison": links.slacks["fs_comparison"],
                "slack_l_tilde_lower": links.slacks["l_tilde_lower"],
                "residual_l_tilde_split": links.residuals["l_tilde_split"],
                "residual_unimodular_rescale": links.residuals["unimodular_rescale"],
                "residual_fs_cocycle": links.residuals["fs_cocycle"],
                "jensen_residual": links.residuals["jensen_identity"],
                "log_det_tau": tau.log_abs_det,
            }
        )
    if truncated:
        logger.warning("ray probe: %d s-samples outside admissible range [%.3f, %.3f]", truncated, lo, hi)
    return RayProfile(weights=weights, frame=pd.DataFrame(rows, columns=PROBE_COLUMNS), admissible=(lo, hi), truncated=truncated)


def random_weights(n_sections: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian weights projected to sum zero (determinant-one rays)."""
    a = rng.normal(size=n_sections)
    return a - a.mean()
