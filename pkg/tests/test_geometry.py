from __future__ import annotations

import numpy as np
import pytest

from krflow.errors import ModelError
from krflow.geometry import (
    Grid,
    PotentialField,
    ReflexivePolytope,
    get_model,
    load_polytope_file,
    make_perturbation,
    model_registry,
    perturbed_field,
    reference_field,
    tilted_reference,
)


def test_registry_names():
    assert model_registry() == ["bl1cp2", "cp1", "cp1xcp1", "cp2"]


@pytest.mark.parametrize(
    "name, volume, n1",
    [("cp1", 2.0, 3), ("cp1xcp1", 4.0, 9), ("cp2", 4.5, 10), ("bl1cp2", 4.0, 9)],
)
def test_builtin_volumes_and_sections(name, volume, n1):
    model = get_model(name, m_max=2)
    assert model.volume == pytest.approx(volume)
    assert model.n_sections(1) == n1


def test_cp1_section_counts():
    model = get_model("cp1", m_max=16)
    for m in range(1, 17):
        assert model.n_sections(m) == 2 * m + 1


def test_bl1cp2_ehrhart_polynomial():
    model = get_model("bl1cp2", m_max=6)
    for m in range(1, 7):
        assert model.n_sections(m) == 4 * m * m + 4 * m + 1


def test_lattice_points_sorted_and_inside():
    poly = ReflexivePolytope.from_normals([[1, 0], [0, 1], [-1, -1]])
    pts = poly.lattice_points(2)
    assert poly.contains(pts, 2).all()
    assert [tuple(p) for p in pts] == sorted(tuple(p) for p in pts)


def test_projective_reference_coefficients():
    cp1 = get_model("cp1")
    np.testing.assert_allclose(np.exp(cp1.reference.log_coeffs), [1.0, 2.0, 1.0])
    cp2 = get_model("cp2")
    assert np.exp(cp2.reference.log_coeffs).sum() == pytest.approx(27.0)


@pytest.mark.parametrize(
    "normals, message",
    [
        ([[2], [-1]], "non-reflexive"),
        ([[1], [2]], "around the origin"),
        ([[1, 0], [0, 1]], "around the origin"),
        ([[1.5], [-1]], "integral"),
    ],
)
def test_invalid_polytopes(normals, message):
    with pytest.raises(ModelError, match=message):
        ReflexivePolytope.from_normals(normals)


def test_unknown_model():
    with pytest.raises(ModelError, match="unknown model"):
        get_model("quintic")


def test_sections_above_m_max(cp1):
    with pytest.raises(ValueError, match="m_max"):
        cp1.sections(cp1.m_max + 1)


def test_load_polytope_file(tmp_path):
    path = tmp_path / "bl1.poly"
    path.write_text("# blow-up of CP^2 at a point\ndim 2\n1 0\n0 1\n-1 -1\n1 1  # exceptional divisor\n")
    poly = load_polytope_file(path)
    assert poly.dimension == 2
    assert poly.volume == pytest.approx(4.0)


@pytest.mark.parametrize("text", ["2\n1 0\n", "dim 2\n1 0 3\n", "dim x\n"])
def test_load_polytope_file_rejects(tmp_path, text):
    path = tmp_path / "bad.poly"
    path.write_text(text)
    with pytest.raises(ModelError):
        load_polytope_file(path)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(half_width=5.0, points_per_axis=100)
    with pytest.raises(ValueError):
        Grid(half_width=5.0, points_per_axis=5)
    with pytest.raises(ValueError):
        Grid(half_width=5.0, points_per_axis=11, dimension=3)


def test_grid_quadrature():
    grid = Grid(half_width=3.0, points_per_axis=61, dimension=2)
    assert grid.points.shape == (61, 61, 2)
    assert grid.integrate(np.ones(grid.shape)) == pytest.approx(36.0)
    assert grid.boundary_mask().sum() == 4 * 60
    np.testing.assert_allclose(grid.points[grid.center_index], [0.0, 0.0], atol=1e-12)


def test_log_sum_exp_derivatives_match_closed_form(cp1):
    x = np.linspace(-6.0, 6.0, 13)[:, None]
    d = cp1.reference.derivatives(x)
    y = x[:, 0] / 2.0
    np.testing.assert_allclose(d["value"], 2.0 * np.log(2.0 * np.cosh(y)), rtol=1e-13)
    np.testing.assert_allclose(d["grad"][:, 0], np.tanh(y), atol=1e-14)
    np.testing.assert_allclose(d["hess"][:, 0, 0], 0.5 / np.cosh(y) ** 2, rtol=1e-12)
    # third derivative of 2 log cosh(x/2)
    third = -0.5 * np.tanh(y) / np.cosh(y) ** 2
    np.testing.assert_allclose(d["third"][:, 0, 0, 0], third, atol=1e-13)


def test_log_sum_exp_derivatives_far_tail_positive(cp1):
    x = np.array([[-40.0], [40.0]])
    hess = cp1.reference.derivatives(x)["hess"][:, 0, 0]
    assert np.all(hess > 0)
    np.testing.assert_allclose(hess, 2.0 * np.exp(-40.0), rtol=1e-6)


def test_perturbation_shapes(cp1_grid):
    assert not make_perturbation(cp1_grid, "none").any()
    np.testing.assert_allclose(make_perturbation(cp1_grid, "constant", amplitude=0.2), 0.2)
    bump = make_perturbation(cp1_grid, "bump", amplitude=0.3)
    assert bump[cp1_grid.center_index] == pytest.approx(0.3)
    np.testing.assert_allclose(bump, bump[::-1])
    offset = make_perturbation(cp1_grid, "offset-bump", amplitude=0.3)
    assert not np.allclose(offset, offset[::-1])
    with pytest.raises(ValueError):
        make_perturbation(cp1_grid, "spiral")


def test_algebraic_perturbation_tilts_reference(cp1, cp1_grid):
    a = -0.2
    phi = perturbed_field(cp1, cp1_grid, "algebraic", amplitude=a)
    assert not phi.u.any()
    x = cp1_grid.axis
    np.testing.assert_allclose(phi.values(), a + np.log(2.0 * np.cosh(x) + 2.0 * np.exp(-a)), rtol=1e-12)
    grad = phi.base_derivatives["grad"][:, 0]
    assert np.all(np.abs(grad) < 1.0)
    assert grad[-1] == pytest.approx(1.0, abs=1e-8)
    assert np.max(np.abs(phi.relative())) > 0.05
    reference = tilted_reference(cp1, 0.0)
    np.testing.assert_array_equal(reference.log_coeffs, cp1.reference.log_coeffs)
    bumped = perturbed_field(cp1, cp1_grid, "bump", amplitude=0.3)
    np.testing.assert_array_equal(bumped.u, make_perturbation(cp1_grid, "bump", amplitude=0.3))
    with pytest.raises(ValueError, match="perturbed_field"):
        make_perturbation(cp1_grid, "algebraic")


def test_random_perturbation_is_seeded(cp1_grid):
    a = make_perturbation(cp1_grid, "random", rng=np.random.default_rng(7))
    b = make_perturbation(cp1_grid, "random", rng=np.random.default_rng(7))
    c = make_perturbation(cp1_grid, "random", rng=np.random.default_rng(8))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_potential_field_gauge(fubini_study):
    shifted = fubini_study.shifted(0.5)
    np.testing.assert_allclose(shifted.values() - fubini_study.values(), 0.5)
    assert shifted.ungauged().shift == 0.0
    np.testing.assert_allclose(fubini_study.relative(), 0.0)


def test_potential_field_shape_checked(cp1, cp1_grid):
    with pytest.raises(ValueError, match="shape"):
        PotentialField(model=cp1, grid=cp1_grid, u=np.zeros(5))
    with pytest.raises(ValueError, match="dimensions"):
        reference_field(cp1, Grid(half_width=5.0, points_per_axis=11, dimension=2))
