"""Finite differences on a Grid and the metric fields derived from a PotentialField."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.integrate import cumulative_trapezoid
from scipy.special import logsumexp

from .errors import ConvexityLossError, QuadratureTailError
from .geometry import Grid, PotentialField

logger = logging.getLogger(__name__)

CONVEXITY_FLOOR = 1e-12
RESOLVED_FRACTION = 1e-2
# roundoff of the fourth-order Hessian stencil, in units of max(1, sup|u|) / h^2
HESSIAN_NOISE = 1e3 * float(np.finfo(float).eps)

ONE_SIDED = "one-sided"
EVEN = "even"
CLOSURES = (ONE_SIDED, EVEN)

# fourth-order stencils: (offsets relative to the row, coefficients)
_D1_INTERIOR = (np.arange(-2, 3), np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0)
_D2_INTERIOR = (np.arange(-2, 3), np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0)
_D1_EDGE = [
    (np.arange(0, 5), np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0),
    (np.arange(-1, 4), np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0),
]
_D2_EDGE = [
    (np.arange(0, 6), np.array([45.0, -154.0, 214.0, -156.0, 61.0, -10.0]) / 12.0),
    (np.arange(-1, 5), np.array([10.0, -15.0, -4.0, 14.0, -6.0, 1.0]) / 12.0),
]


def _stencil_matrix(n: int, interior, edges, antisymmetric: bool) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for i in range(n):
        if i < len(edges):
            offs, coef = edges[i]
        elif i >= n - len(edges):
            offs, coef = edges[n - 1 - i]
            offs = -offs
            coef = -coef if antisymmetric else coef
        else:
            offs, coef = interior
        rows.extend([i] * len(offs))
        cols.extend((i + offs).tolist())
        vals.extend(coef.tolist())
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def _reflected_matrix(n: int, interior) -> sp.csr_matrix:
    """Interior stencil everywhere, with ghost nodes folded back by even reflection about the end nodes."""
    offs, coef = interior
    rows, cols, vals = [], [], []
    last = n - 1
    for i in range(n):
        j = i + offs
        j = np.where(j < 0, -j, j)
        j = np.where(j > last, 2 * last - j, j)
        rows.extend([i] * len(offs))
        cols.extend(j.tolist())
        vals.extend(coef.tolist())
    # duplicate (row, col) pairs are summed by the constructor
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


class FiniteDifferences:
    """
    Sparse fourth-order derivative operators on one grid, applied axis by axis.

    closure "one-sided" uses one-sided edge stencils and differentiates any smooth field.
    closure "even" reflects the field evenly at the box faces (zero normal derivative).
    Perturbations u are differentiated with it, which keeps the slope image of Phi fixed.
    """

    def __init__(self, grid: Grid, closure: str = ONE_SIDED):
        if closure not in CLOSURES:
            raise ValueError(f"unknown closure {closure!r}; choose from {CLOSURES}")
        self.grid = grid
        self.closure = closure
        n, h = grid.points_per_axis, grid.h
        if closure == EVEN:
            self.d1 = _reflected_matrix(n, _D1_INTERIOR) / h
            self.d2 = _reflected_matrix(n, _D2_INTERIOR) / h**2
        else:
            self.d1 = _stencil_matrix(n, _D1_INTERIOR, _D1_EDGE, antisymmetric=True) / h
            self.d2 = _stencil_matrix(n, _D2_INTERIOR, _D2_EDGE, antisymmetric=False) / h**2
        self._ops = {0: None, 1: self.d1, 2: self.d2, 3: self.d1 @ self.d2, 4: self.d2 @ self.d2}
        self._full: Dict[Tuple[int, ...], sp.csr_matrix] = {}

    def along(self, op: Optional[sp.spmatrix], values: np.ndarray, axis: int) -> np.ndarray:
        if op is None:
            return values
        moved = np.moveaxis(values, axis, 0)
        shape = moved.shape
        out = op @ moved.reshape(shape[0], -1)
        return np.moveaxis(np.asarray(out).reshape(shape), 0, axis)

    def partial(self, values: np.ndarray, counts: Sequence[int]) -> np.ndarray:
        """Mixed partial derivative with counts[k] derivatives along axis k."""
        out = values
        for axis, c in enumerate(counts):
            out = self.along(self._ops[c], out, axis)
        return out

    def _tensor(self, values: np.ndarray, order: int) -> np.ndarray:
        dim = self.grid.dimension
        cache: Dict[Tuple[int, ...], np.ndarray] = {}
        out = np.empty(values.shape + (dim,) * order)
        for idx in itertools.product(range(dim), repeat=order):
            counts = tuple(idx.count(k) for k in range(dim))
            if counts not in cache:
                cache[counts] = self.partial(values, counts)
            out[(Ellipsis,) + idx] = cache[counts]
        return out

    def gradient(self, values: np.ndarray) -> np.ndarray:
        return self._tensor(values, 1)

    def hessian(self, values: np.ndarray) -> np.ndarray:
        return self._tensor(values, 2)

    def third(self, values: np.ndarray) -> np.ndarray:
        return self._tensor(values, 3)

    def fourth(self, values: np.ndarray) -> np.ndarray:
        return self._tensor(values, 4)

    def operator(self, counts: Sequence[int]) -> sp.csr_matrix:
        """The same mixed partial as a sparse matrix acting on C-order flattened fields."""
        key = tuple(counts)
        if key not in self._full:
            n = self.grid.points_per_axis
            eye = sp.identity(n, format="csr")
            mats = [self._ops[c] if c else eye for c in key]
            full = mats[0]
            for mat in mats[1:]:
                full = sp.kron(full, mat, format="csr")
            self._full[key] = sp.csr_matrix(full)
        return self._full[key]


@lru_cache(maxsize=16)
def finite_differences(grid: Grid, closure: str = ONE_SIDED) -> FiniteDifferences:
    return FiniteDifferences(grid, closure)


def laplacian_matrix(grid: Grid, hess_inv: np.ndarray, closure: str = ONE_SIDED) -> sp.csr_matrix:
    """Sparse Delta = sum G^{ij} D_ij acting on C-order flattened fields."""
    fd = finite_differences(grid, closure)
    dim = grid.dimension
    size = int(np.prod(grid.shape))
    out = sp.csr_matrix((size, size))
    for i in range(dim):
        for j in range(i, dim):
            counts = [0] * dim
            counts[i] += 1
            counts[j] += 1
            coef = hess_inv[..., i, j].ravel() * (1.0 if i == j else 2.0)
            out = out + sp.diags(coef) @ fd.operator(counts)
    return sp.csr_matrix(out)


def relative_min_eigenvalue(hess: np.ndarray, ref_hess: np.ndarray) -> np.ndarray:
    """Smallest eigenvalue of G_ref^{-1/2} G G_ref^{-1/2} per node."""
    if hess.shape[-1] == 1:
        return hess[..., 0, 0] / ref_hess[..., 0, 0]
    linv = np.linalg.inv(np.linalg.cholesky(ref_hess))
    sym = linv @ hess @ np.swapaxes(linv, -1, -2)
    return np.linalg.eigvalsh(0.5 * (sym + np.swapaxes(sym, -1, -2)))[..., 0]


def check_convexity(hess: np.ndarray, ref_hess: np.ndarray, checked: Optional[np.ndarray] = None) -> np.ndarray:
    """Relative smallest eigenvalue per node; raises on the worst checked node at or below the floor."""
    ratio = relative_min_eigenvalue(hess, ref_hess)
    bad = ~(ratio > CONVEXITY_FLOOR)
    if checked is not None:
        bad &= checked
    if np.any(bad):
        flat = int(np.argmin(np.where(bad, np.where(np.isnan(ratio), -np.inf, ratio), np.inf)))
        node = np.unravel_index(flat, ratio.shape)
        raise ConvexityLossError(node, float(ratio[node]))
    return ratio


def hessian_resolved(ref_hess: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    """Nodes where the reference metric exceeds the roundoff of the stencil Hessian of u."""
    lam = np.linalg.eigvalsh(ref_hess)[..., 0]
    scale = max(1.0, float(np.max(np.abs(u)))) if u.size else 1.0
    return lam >= HESSIAN_NOISE * scale / h**2


def perturbed_hessian(
    base_hess: np.ndarray, ref_hess: np.ndarray, u: np.ndarray, fd: FiniteDifferences
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    base Hessian + D^2 u with convexity enforced where the stencil resolves the metric.

    At unresolved nodes, eigenvalues relative to the reference metric are clipped at
    CONVEXITY_FLOOR, so log det stays finite. Returns (hess, ratio, resolved).
    """
    hess = base_hess + fd.hessian(u)
    resolved = hessian_resolved(ref_hess, u, fd.grid.h)
    ratio = check_convexity(hess, ref_hess, checked=resolved)
    low = ~(ratio > CONVEXITY_FLOOR)
    if np.any(low):
        hess = hess.copy()
        hess[low] = _lift_to_floor(hess[low], ref_hess[low])
        ratio = np.where(low, CONVEXITY_FLOOR, ratio)
        logger.debug("lifted %d unresolved nodes to the convexity floor", int(low.sum()))
    return hess, ratio, resolved


def _lift_to_floor(hess: np.ndarray, ref_hess: np.ndarray) -> np.ndarray:
    """Clip the eigenvalues of G_ref^{-1/2} G G_ref^{-1/2} at CONVEXITY_FLOOR and map back."""
    if hess.shape[-1] == 1:
        return CONVEXITY_FLOOR * ref_hess
    chol = np.linalg.cholesky(ref_hess)
    linv = np.linalg.inv(chol)
    sym = linv @ hess @ np.swapaxes(linv, -1, -2)
    lam, vec = np.linalg.eigh(0.5 * (sym + np.swapaxes(sym, -1, -2)))
    clipped = (vec * np.maximum(lam, CONVEXITY_FLOOR)[..., None, :]) @ np.swapaxes(vec, -1, -2)
    return chol @ clipped @ np.swapaxes(chol, -1, -2)


def resolved_region(hess: np.ndarray, fraction: float = RESOLVED_FRACTION) -> np.ndarray:
    """Nodes whose smallest metric eigenvalue is at least `fraction` of its grid maximum."""
    lam = np.linalg.eigvalsh(hess)[..., 0]
    return lam >= fraction * lam.max()


def tail_ratio(integrand: np.ndarray, grid: Grid) -> float:
    peak = float(np.max(np.abs(integrand)))
    if peak == 0.0:
        return 0.0
    return float(np.max(np.abs(integrand[grid.boundary_mask()]))) / peak


def check_tail(integrand: np.ndarray, grid: Grid, tolerance: float, m: Optional[int] = None) -> float:
    ratio = tail_ratio(integrand, grid)
    if ratio > tolerance:
        raise QuadratureTailError(ratio, tolerance, m)
    return ratio


@dataclass
class MetricFields:
    """Pointwise geometry of omega_phi on the log-affine chart."""

    potential: PotentialField
    hess: np.ndarray
    hess_inv: np.ndarray
    det: np.ndarray
    logdet: np.ndarray
    grad: np.ndarray
    scalar_curvature: np.ndarray
    ricci_potential: np.ndarray
    ricci_constant: float
    rm_norm: np.ndarray
    resolved: np.ndarray
    volume: float
    convexity_ratio: np.ndarray

    @property
    def grid(self) -> Grid:
        return self.potential.grid

    @property
    def dimension(self) -> int:
        return self.grid.dimension

    @property
    def measure(self) -> np.ndarray:
        """Quadrature weights of dmu_phi."""
        return self.det * self.grid.weights

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(values * self.measure))

    def mean(self, values: np.ndarray) -> float:
        return self.integrate(values) / self.volume

    def laplacian(self, values: np.ndarray) -> np.ndarray:
        d2 = finite_differences(self.grid).hessian(values)
        return np.einsum("...ij,...ij->...", self.hess_inv, d2)

    def grad_inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """G^{-1}(Da, Db) per node."""
        fd = finite_differences(self.grid)
        return np.einsum("...ij,...i,...j->...", self.hess_inv, fd.gradient(a), fd.gradient(b))

    def cofactor_pairing(self, a: np.ndarray, b: Optional[np.ndarray] = None) -> np.ndarray:
        """G^{-1}(Da, Db) det G per node, via the adjugate so no G^{-1} e^{|x|} growth enters."""
        fd = finite_differences(self.grid)
        ga = fd.gradient(a)
        gb = ga if b is None else fd.gradient(b)
        if self.dimension == 1:
            return ga[..., 0] * gb[..., 0]
        adj = np.empty_like(self.hess)
        adj[..., 0, 0] = self.hess[..., 1, 1]
        adj[..., 1, 1] = self.hess[..., 0, 0]
        adj[..., 0, 1] = adj[..., 1, 0] = -self.hess[..., 0, 1]
        return np.einsum("...ij,...i,...j->...", adj, ga, gb)

    def integrate_dx(self, values: np.ndarray) -> float:
        """∫ values dx (no metric density)."""
        return self.grid.integrate(values)

    def laplacian_operator(self) -> sp.csr_matrix:
        return laplacian_matrix(self.grid, self.hess_inv)

    def sup(self, values: np.ndarray) -> float:
        """sup |values| over the resolved region."""
        return float(np.max(np.abs(values[self.resolved])))

    def c2_norm(self, values: np.ndarray) -> float:
        """Fixed-grid C^2 norm over the resolved region."""
        fd = finite_differences(self.grid)
        parts = [np.abs(values)]
        parts.append(np.linalg.norm(fd.gradient(values), axis=-1))
        parts.append(np.linalg.norm(fd.hessian(values).reshape(values.shape + (-1,)), axis=-1))
        return float(max(np.max(p[self.resolved]) for p in parts))


def potential_hessian(phi: PotentialField) -> np.ndarray:
    """D^2 Phi with the convexity check, without the curvature work of metric_fields."""
    fd = finite_differences(phi.grid, EVEN)
    hess, _, _ = perturbed_hessian(phi.base_derivatives["hess"], phi.reference_derivatives["hess"], phi.u, fd)
    return hess


def metric_fields(phi: PotentialField) -> MetricFields:
    """
    Metric, volume density, curvature and Ricci potential of phi.
    Raises ConvexityLossError when the Hessian is not positive definite relative to the reference.
    """
    grid = phi.grid
    fd = finite_differences(grid, EVEN)
    base = phi.base_derivatives
    hess, ratio, stencil_ok = perturbed_hessian(base["hess"], phi.reference_derivatives["hess"], phi.u, fd)

    third = base["third"] + fd.third(phi.u)
    fourth = base["fourth"] + fd.fourth(phi.u)
    ginv = np.linalg.inv(hess)
    _, logdet = np.linalg.slogdet(hess)
    det = np.exp(logdet)

    rm = -fourth + np.einsum("...pq,...ikq,...jlp->...ijkl", ginv, third, third, optimize=True)
    scalar = np.einsum("...ij,...kl,...ijkl->...", ginv, ginv, rm, optimize=True)
    rm_up = np.einsum("...ia,...jb,...kc,...ld,...abcd->...ijkl", ginv, ginv, ginv, ginv, rm, optimize=True)
    rm_norm = np.sqrt(np.maximum(np.einsum("...ijkl,...ijkl->...", rm, rm_up), 0.0))

    values = phi.values()
    volume = grid.integrate(det)
    # e^c = V / ∫ e^{-Phi} dx makes ∫ e^f dmu = V on the quadrature
    log_int = float(logsumexp(-values, b=grid.weights))
    c = math.log(volume) - log_int
    ricci = -logdet - values + c

    grad = base["grad"] + fd.gradient(phi.u)
    mask = resolved_region(hess) & stencil_ok
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("metric fields: V=%.12g, c=%.6g, resolved nodes=%d", volume, c, int(mask.sum()))
    return MetricFields(
        potential=phi,
        hess=hess,
        hess_inv=ginv,
        det=det,
        logdet=logdet,
        grad=grad,
        scalar_curvature=scalar,
        ricci_potential=ricci,
        ricci_constant=c,
        rm_norm=rm_norm,
        resolved=mask,
        volume=volume,
        convexity_ratio=ratio,
    )


def gradient_excess(fields: MetricFields) -> float:
    """Largest violation of <nu_a, grad Phi> >= -1; <= 0 when the gradient image lies in P."""
    normals = fields.potential.model.polytope.normals.astype(float)
    pairing = fields.grad @ normals.T
    return float(np.max(-1.0 - pairing))


@dataclass(frozen=True)
class CurvatureMonitors:
    sup_rm: float
    ln_rm: float
    sup_delta_r: float


def curvature_monitors(fields: MetricFields) -> CurvatureMonitors:
    """sup |Rm|, ∫ |Rm|^n dmu and sup |Delta R| over the resolved region."""
    n = fields.dimension
    integrand = np.where(fields.resolved, fields.rm_norm**n, 0.0)
    delta_r = fields.laplacian(fields.scalar_curvature)
    return CurvatureMonitors(
        sup_rm=fields.sup(fields.rm_norm),
        ln_rm=fields.integrate(integrand),
        sup_delta_r=fields.sup(delta_r),
    )


@dataclass(frozen=True)
class GeometryMonitors:
    diameter: float
    axis_length: float
    max_fiber_circumference: float
    kappa_hat: float
    kappa_by_radius: Dict[float, float]


DEFAULT_RADII = (0.1, 0.2, 0.3)


def _axis_line(fields: MetricFields, axis: int) -> Tuple[np.ndarray, np.ndarray]:
    idx = list(fields.grid.center_index)
    idx[axis] = slice(None)
    return fields.grid.axis, fields.hess[tuple(idx) + (axis, axis)]


def axis_arclength(fields: MetricFields, axis: int = 0) -> np.ndarray:
    """Cumulative arclength along a coordinate axis through the origin, ds = sqrt(G_ii / 4pi) dx."""
    x, g = _axis_line(fields, axis)
    return cumulative_trapezoid(np.sqrt(g / (4.0 * np.pi)), x, initial=0.0)


def geometry_monitors(fields: MetricFields, radii: Sequence[float] = DEFAULT_RADII, centers: int = 9) -> GeometryMonitors:
    """Diameter surrogate and ball-volume ratio kappa_hat(r) = min_p vol B(p, r) / r^{2n}."""
    n = fields.dimension
    axis_len = max(float(axis_arclength(fields, k)[-1]) for k in range(n))
    diag = np.stack([fields.hess[..., k, k] for k in range(n)], axis=-1)
    fiber = float(np.max(2.0 * np.pi * np.sqrt(diag / np.pi)))
    diameter = axis_len if n == 1 else axis_len + 0.5 * fiber

    sample = _ball_centres(fields, centers)
    by_radius: Dict[float, float] = {}
    for r in radii:
        vols = [_ball_volume(fields, c, r) for c in sample]
        by_radius[float(r)] = float(min(vols) / r ** (2 * n))
    return GeometryMonitors(
        diameter=diameter,
        axis_length=axis_len,
        max_fiber_circumference=fiber,
        kappa_hat=min(by_radius.values()),
        kappa_by_radius=by_radius,
    )


def _ball_centres(fields: MetricFields, count: int) -> list:
    nodes = np.argwhere(fields.resolved)
    if len(nodes) <= count:
        return [tuple(v) for v in nodes]
    pick = np.linspace(0, len(nodes) - 1, count).round().astype(int)
    return [tuple(nodes[i]) for i in pick]


_UNIT_BALL = {1: 2.0, 2: np.pi}


def _ball_volume(fields: MetricFields, centre: Tuple[int, ...], r: float) -> float:
    n = fields.dimension
    if n == 1:
        s = axis_arclength(fields, 0)
        dist = np.abs(s - s[centre[0]])
    else:
        x = fields.grid.points
        x0 = x[centre]
        g = 0.5 * (fields.hess + fields.hess[centre]) / (4.0 * np.pi)
        dx = x - x0
        dist = np.sqrt(np.maximum(np.einsum("...i,...ij,...j->...", dx, g, dx), 0.0))
    inside = dist < r
    rho = np.sqrt(np.maximum(r**2 - dist**2, 0.0))
    fiber_volume = (2.0 * np.pi) ** n * np.sqrt(fields.det / np.pi**n)
    frac = np.minimum(1.0, _UNIT_BALL[n] * rho**n / fiber_volume)
    return float(np.sum(np.where(inside, frac * fields.measure, 0.0)))
