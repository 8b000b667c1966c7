"""Plurianticanonical sections, Gram matrices, density of states and TYZC residuals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from scipy.stats import linregress

from .errors import QuadratureTailError
from .fields import MetricFields, finite_differences, metric_fields
from .geometry import LogSumExpPotential, PotentialField, ToricModel

logger = logging.getLogger(__name__)

DEFAULT_TAIL_TOLERANCE = 1e-6
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class SectionBasis:
    """
    Basis of H^0(M, K_M^{-m}) built from the monomials s_alpha, alpha in mP.

    Monomial alpha is scaled by exp(-log_norms[alpha] / 2); `transform`, when set,
    expresses basis section i as sum_alpha transform[i, alpha] * (scaled monomial alpha).
    """

    m: int
    points: np.ndarray
    log_norms: np.ndarray
    transform: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return int(len(self.points))

    def log_weights(self, phi: PotentialField) -> np.ndarray:
        """log |scaled monomial|^2_{h^m}, shape (*grid, N_m)."""
        logits = phi.grid.points @ self.points.T.astype(float)
        return logits - self.log_norms - self.m * phi.values()[..., None]

    def transformed(self, tau: np.ndarray) -> "SectionBasis":
        tau = np.asarray(tau)
        if tau.shape != (self.size, self.size):
            raise ValueError(f"basis change must be {self.size}x{self.size}")
        current = self.transform if self.transform is not None else np.eye(self.size)
        return replace(self, transform=tau @ current)

    def permuted(self, order: Sequence[int]) -> "SectionBasis":
        order = np.asarray(order)
        tr = None if self.transform is None else self.transform[np.ix_(order, order)]
        return SectionBasis(self.m, self.points[order], self.log_norms[order], tr)


def section_basis(model: ToricModel, m: int) -> SectionBasis:
    pts = model.sections(m)
    return SectionBasis(m=m, points=pts, log_norms=np.zeros(len(pts)))


@dataclass(frozen=True)
class GramMatrix:
    m: int
    log_diag: np.ndarray
    transform: Optional[np.ndarray]
    c: float
    condition: float
    flagged: bool
    tail: float

    @property
    def diagonal(self) -> bool:
        return self.transform is None

    @property
    def n_sections(self) -> int:
        return int(len(self.log_diag))

    @property
    def matrix(self) -> np.ndarray:
        """H = B diag(h) B^*; torus weights are L^2-orthogonal on the slice."""
        d = np.exp(self.log_diag)
        if self.transform is None:
            return np.diag(d)
        b = self.transform
        return (b * d) @ b.conj().T


def _grid_logsumexp(log_values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    k = log_values.shape[-1]
    return logsumexp(log_values.reshape(-1, k), b=weights.reshape(-1, 1), axis=0)


def _tail_ratio(log_integrand: np.ndarray, boundary: np.ndarray) -> float:
    k = log_integrand.shape[-1]
    flat = log_integrand.reshape(-1, k)
    peak = flat.max(axis=0)
    edge = flat[boundary.ravel()].max(axis=0)
    return float(np.exp(np.max(edge - peak)))


def gram_matrix(
    phi: PotentialField,
    m: int,
    basis: Optional[SectionBasis] = None,
    fields: Optional[MetricFields] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> GramMatrix:
    """
    Gram matrix of the basis at phi with c_phi = log |det H|.

    Diagonal entries are evaluated in the log domain; a basis transform B enters
    only through 2 log |det B|, so c stays finite for badly scaled bases.
    """
    fields = fields if fields is not None else metric_fields(phi)
    basis = basis if basis is not None else section_basis(phi.model, m)
    if basis.m != m:
        raise ValueError(f"basis is for m={basis.m}, not m={m}")
    log_integrand = basis.log_weights(phi) + fields.logdet[..., None]
    tail = _tail_ratio(log_integrand, phi.grid.boundary_mask())
    if tail > tail_tolerance:
        raise QuadratureTailError(tail, tail_tolerance, m)
    log_diag = _grid_logsumexp(log_integrand, phi.grid.weights)

    if basis.transform is None:
        c = float(np.sum(log_diag))
        condition = float(np.exp(min(log_diag.max() - log_diag.min(), 700.0)))
    else:
        _, logdet_b = np.linalg.slogdet(basis.transform)
        c = float(np.sum(log_diag) + 2.0 * logdet_b)
        scaled = basis.transform * np.exp(0.5 * (log_diag - log_diag.max()))
        condition = float(np.linalg.cond(scaled @ scaled.conj().T))
    flagged = condition > CONDITION_LIMIT
    if flagged:
        logger.debug("gram m=%d: condition %.3e above %.0e; c from log-diagonal", m, condition, CONDITION_LIMIT)
    return GramMatrix(
        m=m, log_diag=log_diag, transform=basis.transform, c=c, condition=condition, flagged=flagged, tail=tail
    )


def orthonormal_basis(
    phi: PotentialField,
    m: int,
    fields: Optional[MetricFields] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> SectionBasis:
    """Monomial basis rescaled to be L^2-orthonormal at phi."""
    gram = gram_matrix(phi, m, fields=fields, tail_tolerance=tail_tolerance)
    return SectionBasis(m=m, points=phi.model.sections(m), log_norms=gram.log_diag.copy())


@dataclass
class DensityOfStates:
    m: int
    rho: np.ndarray
    n_sections: int
    fields: MetricFields
    gram: GramMatrix

    @property
    def integral(self) -> float:
        return self.fields.integrate(self.rho)

    @property
    def balanced_value(self) -> float:
        return self.n_sections / self.fields.volume


def density_of_states(
    phi: PotentialField,
    m: int,
    fields: Optional[MetricFields] = None,
    basis: Optional[SectionBasis] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> DensityOfStates:
    """rho_m(x) = sum_i |S_i|^2 over an L^2-orthonormal basis at phi."""
    fields = fields if fields is not None else metric_fields(phi)
    basis = basis if basis is not None else section_basis(phi.model, m)
    gram = gram_matrix(phi, m, basis=basis, fields=fields, tail_tolerance=tail_tolerance)
    logw = basis.log_weights(phi)
    if basis.transform is None:
        rho = np.exp(logsumexp(logw - gram.log_diag, axis=-1))
    else:
        rho = _density_general(logw, gram)
    return DensityOfStates(m=m, rho=rho, n_sections=basis.size, fields=fields, gram=gram)


def _density_general(logw: np.ndarray, gram: GramMatrix) -> np.ndarray:
    # rho = tr(H^{-1} B W B^*), W = sqrt(w) sqrt(w)^T, in the frame scaled by the Gram diagonal
    scale = 0.5 * gram.log_diag
    b = gram.transform * np.exp(scale)[None, :]
    h = b @ b.conj().T
    v = np.exp(0.5 * logw - scale)
    bv = v @ b.T
    sol = np.linalg.solve(h, bv.reshape(-1, bv.shape[-1]).T).T.reshape(bv.shape)
    return np.real(np.sum(bv.conj() * sol, axis=-1))


def fubini_study_potential(basis: SectionBasis) -> LogSumExpPotential:
    """(1/m) log sum_alpha e^{<alpha,x>} / h_alpha: the pulled-back Fubini-Study potential of the embedding."""
    return LogSumExpPotential(points=basis.points, log_coeffs=-basis.log_norms, scale=1.0 / basis.m)


def pullback_residual(phi: PotentialField, m: int, fields: Optional[MetricFields] = None) -> float:
    """
    sup over the resolved region of |D^2 phi_FS,m - (1/m) D^2 log rho_m - G|, relative to sup |G|.
    Zero when omega_phi = (1/m) omega_FS,m - (1/m) ddbar log rho_m holds on the grid.
    """
    fields = fields if fields is not None else metric_fields(phi)
    basis = orthonormal_basis(phi, m, fields=fields)
    dos = density_of_states(phi, m, fields=fields, basis=basis)
    fs_hess = fubini_study_potential(basis).derivatives(phi.grid.points)["hess"]
    log_rho_hess = finite_differences(phi.grid).hessian(np.log(dos.rho))
    diff = fs_hess - log_rho_hess / m - fields.hess
    size = np.max(np.abs(fields.hess[fields.resolved]))
    return float(np.max(np.abs(diff[fields.resolved])) / size)


def balanced_defect(phi: PotentialField, m: int, fields: Optional[MetricFields] = None) -> float:
    """sup |rho_m V / N_m - 1|; zero for a balanced metric."""
    dos = density_of_states(phi, m, fields=fields)
    return float(np.max(np.abs(dos.rho / dos.balanced_value - 1.0)))


@dataclass(frozen=True)
class DimensionAudit:
    m: int
    n_sections: int
    rr_two_term: float
    deviation: float


def dimension_audit(model: ToricModel, m: int) -> DimensionAudit:
    """Compare N_m with the two-term Riemann-Roch count V m^n + (n V / 2) m^{n-1}."""
    if m < 1:
        raise ValueError("m must be >= 1")
    n, v = model.dimension, model.volume
    count = len(model.polytope.lattice_points(m))
    predicted = v * m**n + 0.5 * n * v * m ** (n - 1)
    return DimensionAudit(m=m, n_sections=count, rr_two_term=predicted, deviation=count - predicted)


@dataclass
class TyzcResidual:
    m: int
    sup_residual: float
    c2_residual: float
    field: np.ndarray


def tyzc_residual(
    phi: PotentialField,
    m: int,
    fields: Optional[MetricFields] = None,
    density: Optional[DensityOfStates] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> TyzcResidual:
    """Norms of (rho_m - m^n - (R/2) m^{n-1}) / m^{n-1} over the resolved region."""
    fields = fields if fields is not None else metric_fields(phi)
    density = density if density is not None else density_of_states(phi, m, fields, tail_tolerance=tail_tolerance)
    n = fields.dimension
    scale = float(m) ** (n - 1)
    resid = (density.rho - m**n - 0.5 * fields.scalar_curvature * scale) / scale
    return TyzcResidual(m=m, sup_residual=fields.sup(resid), c2_residual=fields.c2_norm(resid), field=resid)


@dataclass
class TyzcScan:
    frame: pd.DataFrame
    slope: float
    intercept: float
    stderr: float


def fit_loglog(ms: Sequence[float], values: Sequence[float]) -> Tuple[float, float, float]:
    xs = np.log(np.asarray(ms, dtype=float))
    ys = np.log(np.maximum(np.asarray(values, dtype=float), 1e-300))
    if len(xs) < 2:
        return float("nan"), float("nan"), float("inf")
    fit = linregress(xs, ys)
    return float(fit.slope), float(fit.intercept), float(fit.stderr)


def tyzc_scan(
    phi: PotentialField,
    ms: Iterable[int],
    t: Optional[float] = None,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> TyzcScan:
    """TYZC residuals over exponents with the log-log decay fit of the sup residual."""
    fields = metric_fields(phi)
    rows: List[dict] = []
    for m in ms:
        r = tyzc_residual(phi, m, fields=fields, tail_tolerance=tail_tolerance)
        rows.append({"m": m, "sup_residual": r.sup_residual, "c2_residual": r.c2_residual, "t": t})
        logger.info("tyzc m=%d: sup=%.3e c2=%.3e", m, r.sup_residual, r.c2_residual)
    frame = pd.DataFrame(rows, columns=["m", "sup_residual", "c2_residual", "t"])
    slope, intercept, stderr = fit_loglog(frame["m"], frame["sup_residual"])
    return TyzcScan(frame=frame, slope=slope, intercept=intercept, stderr=stderr)


def tyzc_uniformity(
    samples: Iterable[Tuple[float, PotentialField]],
    m: int,
    tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
) -> pd.DataFrame:
    """Residual norms at one exponent along (t, phi_t) samples of a flow."""
    rows = []
    for t, phi in samples:
        r = tyzc_residual(phi, m, tail_tolerance=tail_tolerance)
        rows.append({"m": m, "sup_residual": r.sup_residual, "c2_residual": r.c2_residual, "t": float(t)})
    return pd.DataFrame(rows, columns=["m", "sup_residual", "c2_residual", "t"])
