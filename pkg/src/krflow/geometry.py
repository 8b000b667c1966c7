"""Toric Fano models on the log-affine chart: polytopes, section lattices, grids and potentials."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial import ConvexHull
from scipy.special import factorial, logsumexp

from .errors import ModelError

logger = logging.getLogger(__name__)

VERTEX_TOL = 1e-9


@dataclass(frozen=True)
class ReflexivePolytope:
    """Lattice polytope {y : <nu_a, y> >= -1}; the moment polytope of K_M^{-1}."""

    normals: np.ndarray
    vertices: np.ndarray

    @property
    def dimension(self) -> int:
        return int(self.normals.shape[1])

    @cached_property
    def volume(self) -> float:
        if self.dimension == 1:
            return float(self.vertices.max() - self.vertices.min())
        return float(ConvexHull(self.vertices.astype(float)).volume)

    @staticmethod
    def from_normals(normals: Union[Sequence[Sequence[int]], np.ndarray]) -> "ReflexivePolytope":
        nu = np.atleast_2d(np.asarray(normals))
        if nu.size == 0:
            raise ModelError("polytope needs at least one facet normal")
        if not np.issubdtype(nu.dtype, np.integer):
            if not np.allclose(nu, np.round(nu)):
                raise ModelError("facet normals must be integral")
            nu = np.round(nu).astype(np.int64)
        nu = nu.astype(np.int64)
        n = nu.shape[1]
        if n < 1:
            raise ModelError("dimension must be >= 1")
        if np.any(~nu.any(axis=1)):
            raise ModelError("zero facet normal")
        if not _origin_interior_to_normals(nu):
            raise ModelError("facet normals do not bound a polytope around the origin")
        vertices = _enumerate_vertices(nu)
        if len(vertices) < n + 1:
            raise ModelError("polytope is not full-dimensional")
        if not np.allclose(vertices, np.round(vertices), atol=1e-9):
            raise ModelError(f"non-reflexive polytope: vertices {vertices.tolist()} are not lattice points")
        verts = np.round(vertices).astype(np.int64)
        return ReflexivePolytope(normals=nu, vertices=verts)

    def contains(self, points: np.ndarray, m: int = 1) -> np.ndarray:
        """Mask of points y with <nu_a, y> >= -m for all facets."""
        pts = np.atleast_2d(points)
        return np.all(pts @ self.normals.T >= -m - VERTEX_TOL, axis=1)

    def lattice_points(self, m: int) -> np.ndarray:
        """Lattice points of mP, sorted lexicographically."""
        lo = m * self.vertices.min(axis=0)
        hi = m * self.vertices.max(axis=0)
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        cand = np.array(list(itertools.product(*axes)), dtype=np.int64).reshape(-1, self.dimension)
        pts = cand[self.contains(cand, m)]
        order = np.lexsort(pts.T[::-1])
        return pts[order]


def _origin_interior_to_normals(nu: np.ndarray) -> bool:
    n = nu.shape[1]
    if n == 1:
        return bool((nu > 0).any() and (nu < 0).any())
    if len(nu) <= n:
        return False
    try:
        hull = ConvexHull(nu.astype(float))
    except Exception:  # qhull raises its own error type for degenerate input
        return False
    return bool(np.all(hull.equations[:, -1] < -VERTEX_TOL))


def _enumerate_vertices(nu: np.ndarray) -> np.ndarray:
    n = nu.shape[1]
    found: List[np.ndarray] = []
    for rows in itertools.combinations(range(len(nu)), n):
        a = nu[list(rows)].astype(float)
        if abs(np.linalg.det(a)) < 1e-12:
            continue
        y = np.linalg.solve(a, -np.ones(n))
        if np.all(nu @ y >= -1 - VERTEX_TOL):
            if not any(np.allclose(y, v, atol=1e-9) for v in found):
                found.append(y)
    if not found:
        return np.zeros((0, n))
    out = np.array(found)
    return out[np.lexsort(out.T[::-1])]


def load_polytope_file(path: Path) -> ReflexivePolytope:
    """
    Read a polytope file: header line "dim n", then one facet normal per line.
    Blank lines and '#' comments are ignored.
    """
    lines = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines or not lines[0].lower().startswith("dim"):
        raise ModelError(f"{path}: first line must be 'dim n'")
    try:
        n = int(lines[0].split()[1])
        normals = [[int(tok) for tok in ln.replace(",", " ").split()] for ln in lines[1:]]
    except (IndexError, ValueError) as e:
        raise ModelError(f"{path}: {e}") from e
    if any(len(row) != n for row in normals):
        raise ModelError(f"{path}: every normal needs {n} integers")
    return ReflexivePolytope.from_normals(normals)


@dataclass(frozen=True)
class Grid:
    """Symmetric tensor grid on [-L, L]^n with trapezoid weights."""

    half_width: float
    points_per_axis: int
    dimension: int = 1

    def __post_init__(self) -> None:
        if self.half_width <= 0:
            raise ValueError("grid half-width must be positive")
        if self.points_per_axis < 7 or self.points_per_axis % 2 == 0:
            raise ValueError("points per axis must be odd and >= 7")
        if self.dimension not in (1, 2):
            raise ValueError("grids are 1- or 2-dimensional")

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / (self.points_per_axis - 1)

    @property
    def shape(self) -> tuple:
        return (self.points_per_axis,) * self.dimension

    @cached_property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.half_width, self.half_width, self.points_per_axis)

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape (*shape, n)."""
        mesh = np.meshgrid(*([self.axis] * self.dimension), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def weights(self) -> np.ndarray:
        w1 = np.full(self.points_per_axis, self.h)
        w1[0] = w1[-1] = 0.5 * self.h
        w = w1
        for _ in range(self.dimension - 1):
            w = np.multiply.outer(w, w1)
        return w

    @property
    def center_index(self) -> tuple:
        return (self.points_per_axis // 2,) * self.dimension

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for ax in range(self.dimension):
            idx = [slice(None)] * self.dimension
            idx[ax] = 0
            mask[tuple(idx)] = True
            idx[ax] = -1
            mask[tuple(idx)] = True
        return mask

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(values * self.weights))

    def header(self) -> Dict[str, float]:
        return {"half_width": self.half_width, "points_per_axis": self.points_per_axis, "dimension": self.dimension}


@dataclass(frozen=True)
class LogSumExpPotential:
    """
    scale * log sum_alpha exp(log_coeffs_alpha + <alpha, x>).

    Derivatives are the cumulants of the softmax distribution over the points,
    evaluated without forming alpha - mean by subtraction.
    """

    points: np.ndarray
    log_coeffs: np.ndarray
    scale: float = 1.0

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.log_coeffs + x @ self.points.T.astype(float)

    def value(self, x: np.ndarray) -> np.ndarray:
        return self.scale * logsumexp(self.logits(x), axis=-1)

    def derivatives(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        """value, grad, hess, third, fourth at nodes x of shape (..., n)."""
        logits = self.logits(x)
        lse = logsumexp(logits, axis=-1, keepdims=True)
        p = np.exp(logits - lse)
        pts = self.points.astype(float)
        diff = pts[:, None, :] - pts[None, :, :]
        d = np.einsum("...b,abk->...ak", p, diff)
        hess = np.einsum("...a,...ai,...aj->...ij", p, d, d)
        third = np.einsum("...a,...ai,...aj,...ak->...ijk", p, d, d, d)
        m4 = np.einsum("...a,...ai,...aj,...ak,...al->...ijkl", p, d, d, d, d)
        fourth = m4 - _pair_sum(hess)
        grad = np.einsum("...a,ak->...k", p, pts)
        s = self.scale
        return {
            "value": s * lse[..., 0],
            "grad": s * grad,
            "hess": s * hess,
            "third": s * third,
            "fourth": s * fourth,
        }


def _pair_sum(h: np.ndarray) -> np.ndarray:
    """H_ij H_kl + H_ik H_jl + H_il H_jk."""
    return (
        np.einsum("...ij,...kl->...ijkl", h, h)
        + np.einsum("...ik,...jl->...ijkl", h, h)
        + np.einsum("...il,...jk->...ijkl", h, h)
    )


@dataclass(frozen=True)
class ToricModel:
    """Immutable toric Fano model: polytope, section lattices per exponent and reference potential."""

    name: str
    polytope: ReflexivePolytope
    m_max: int
    lattices: Dict[int, np.ndarray] = field(repr=False)
    reference: LogSumExpPotential = field(repr=False)

    @property
    def dimension(self) -> int:
        return self.polytope.dimension

    @property
    def volume(self) -> float:
        return self.polytope.volume

    def sections(self, m: int) -> np.ndarray:
        if m < 1:
            raise ValueError("exponent m must be >= 1")
        if m > self.m_max:
            raise ValueError(f"m={m} exceeds m_max={self.m_max} of model {self.name}")
        return self.lattices[m]

    def n_sections(self, m: int) -> int:
        return int(len(self.sections(m)))


def build_model(
    polytope: ReflexivePolytope,
    m_max: int,
    coefficients: Optional[Iterable[float]] = None,
    name: str = "custom",
) -> ToricModel:
    """
    Enumerate the section lattices of mP for 1 <= m <= m_max and tabulate the
    reference potential log sum_{alpha in P} c_alpha e^{<alpha,x>}.
    """
    if m_max < 1:
        raise ModelError("m_max must be >= 1")
    lattices = {m: polytope.lattice_points(m) for m in range(1, m_max + 1)}
    base_pts = lattices[1]
    if coefficients is None:
        coeffs = np.ones(len(base_pts))
    else:
        coeffs = np.asarray(list(coefficients), dtype=float)
        if coeffs.shape != (len(base_pts),) or np.any(coeffs <= 0):
            raise ModelError("reference coefficients must be positive, one per lattice point of P")
    reference = LogSumExpPotential(points=base_pts, log_coeffs=np.log(coeffs), scale=1.0)
    logger.debug("built model %s: n=%d, N_1=%d, m_max=%d", name, polytope.dimension, len(base_pts), m_max)
    return ToricModel(name=name, polytope=polytope, m_max=m_max, lattices=lattices, reference=reference)


def _projective_coefficients(points: np.ndarray) -> np.ndarray:
    # anticanonical CP^n: shift by (1,...,1), multinomial over n+1 slots summing to n+1
    n = points.shape[1]
    beta = points + 1
    beta0 = (n + 1) - beta.sum(axis=1)
    denom = factorial(beta0) * np.prod(factorial(beta), axis=1)
    return factorial(n + 1) / denom


def _product_cp1_coefficients(points: np.ndarray) -> np.ndarray:
    return np.prod(factorial(2) / (factorial(points + 1) * factorial(1 - points)), axis=1)


REGISTRY: Dict[str, dict] = {
    "cp1": {"normals": [[1], [-1]], "coefficients": _projective_coefficients},
    "cp1xcp1": {"normals": [[1, 0], [-1, 0], [0, 1], [0, -1]], "coefficients": _product_cp1_coefficients},
    "cp2": {"normals": [[1, 0], [0, 1], [-1, -1]], "coefficients": _projective_coefficients},
    "bl1cp2": {"normals": [[1, 0], [0, 1], [-1, -1], [1, 1]], "coefficients": None},
}


def model_registry() -> List[str]:
    return sorted(REGISTRY)


def get_model(name: str, m_max: int = 8) -> ToricModel:
    """Built-in model by name (cp1, cp1xcp1, cp2, bl1cp2)."""
    try:
        entry = REGISTRY[name]
    except KeyError as e:
        raise ModelError(f"unknown model {name!r}; choose from {model_registry()}") from e
    polytope = ReflexivePolytope.from_normals(entry["normals"])
    coeff_fn = entry["coefficients"]
    coeffs = coeff_fn(polytope.lattice_points(1)) if coeff_fn else None
    return build_model(polytope, m_max, coeffs, name=name)


@dataclass(frozen=True)
class PotentialField:
    """
    Total potential Phi = base + u + shift on a grid.

    `base` is a log-sum-exp potential with slope polytope P (the model reference
    unless the field was built algebraically); `u` is the bounded perturbation;
    `shift` is the scalar gauge carried separately from `u`.
    """

    model: ToricModel
    grid: Grid
    u: np.ndarray
    shift: float = 0.0
    base: Optional[LogSumExpPotential] = None

    def __post_init__(self) -> None:
        if self.u.shape != self.grid.shape:
            raise ValueError(f"perturbation shape {self.u.shape} does not match grid {self.grid.shape}")
        if self.grid.dimension != self.model.dimension:
            raise ValueError("grid and model dimensions differ")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("perturbation must be finite")

    @property
    def base_potential(self) -> LogSumExpPotential:
        return self.base if self.base is not None else self.model.reference

    @cached_property
    def base_derivatives(self) -> Dict[str, np.ndarray]:
        return self.base_potential.derivatives(self.grid.points)

    @cached_property
    def reference_derivatives(self) -> Dict[str, np.ndarray]:
        if self.base is None:
            return self.base_derivatives
        return self.model.reference.derivatives(self.grid.points)

    def values(self) -> np.ndarray:
        """Phi on the grid, gauge included."""
        return self.base_derivatives["value"] + self.u + self.shift

    def relative(self) -> np.ndarray:
        """Phi - phi_ref: the Kähler potential relative to the reference metric."""
        return self.base_derivatives["value"] - self.reference_derivatives["value"] + self.u + self.shift

    def with_u(self, u: np.ndarray, shift: Optional[float] = None) -> "PotentialField":
        return replace(self, u=u, shift=self.shift if shift is None else float(shift))

    def shifted(self, c: float) -> "PotentialField":
        return replace(self, shift=self.shift + float(c))

    def ungauged(self) -> "PotentialField":
        return replace(self, shift=0.0)


def reference_field(model: ToricModel, grid: Grid) -> PotentialField:
    return PotentialField(model=model, grid=grid, u=np.zeros(grid.shape))


def make_perturbation(
    grid: Grid,
    shape: str = "bump",
    amplitude: float = 0.3,
    width: float = 1.5,
    count: int = 4,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Perturbation u on the grid.

    shapes: none, constant, bump (centred Gaussian, even in x), offset-bump,
    random (seeded sum of `count` Gaussian bumps with centres in [-2, 2]^n).
    The algebraic shape lives in the base potential, see perturbed_field.
    """
    x = grid.points
    if shape == "none":
        return np.zeros(grid.shape)
    if shape == "constant":
        return np.full(grid.shape, float(amplitude))
    if shape == "bump":
        return amplitude * _gauss(x, np.zeros(grid.dimension), width)
    if shape == "offset-bump":
        return amplitude * _gauss(x, np.full(grid.dimension, 0.75), width)
    if shape == "random":
        rng = rng if rng is not None else np.random.default_rng(0)
        u = np.zeros(grid.shape)
        for _ in range(count):
            c = rng.uniform(-2.0, 2.0, size=grid.dimension)
            a = rng.uniform(-1.0, 1.0) * amplitude / count
            w = width * rng.uniform(0.8, 1.25)
            u += a * _gauss(x, c, w)
        return u
    if shape == "algebraic":
        raise ValueError("the algebraic shape changes the base potential; build it with perturbed_field")
    raise ValueError(f"unknown perturbation shape {shape!r}")


def _gauss(x: np.ndarray, center: np.ndarray, width: float) -> np.ndarray:
    r2 = np.sum((x - center) ** 2, axis=-1)
    return np.exp(-0.5 * r2 / width**2)


def tilted_reference(model: ToricModel, amplitude: float) -> LogSumExpPotential:
    """
    Reference potential with log-coefficients tilted by amplitude * |alpha|^2.

    The slope polytope is unchanged, so the metric stays in the reference class; the
    change is a smooth low mode with exact derivatives everywhere on the chart.
    """
    ref = model.reference
    tilt = amplitude * np.sum(ref.points.astype(float) ** 2, axis=1)
    return replace(ref, log_coeffs=ref.log_coeffs + tilt)


def perturbed_field(
    model: ToricModel,
    grid: Grid,
    shape: str = "bump",
    amplitude: float = 0.3,
    width: float = 1.5,
    count: int = 4,
    rng: Optional[np.random.Generator] = None,
) -> PotentialField:
    """Initial potential: an algebraic base for shape "algebraic", otherwise the reference plus make_perturbation."""
    if shape == "algebraic":
        return PotentialField(model=model, grid=grid, u=np.zeros(grid.shape), base=tilted_reference(model, amplitude))
    u = make_perturbation(grid, shape, amplitude=amplitude, width=width, count=count, rng=rng)
    return reference_field(model, grid).with_u(u)
