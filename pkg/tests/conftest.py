from __future__ import annotations

import numpy as np
import pytest

from krflow.fields import metric_fields
from krflow.geometry import Grid, get_model, make_perturbation, perturbed_field, reference_field


@pytest.fixture(scope="session")
def cp1():
    return get_model("cp1", m_max=32)


@pytest.fixture(scope="session")
def cp1_grid():
    return Grid(half_width=20.0, points_per_axis=401)


@pytest.fixture(scope="session")
def wide_grid():
    # Bergman integrals at larger m need the wider window
    return Grid(half_width=28.0, points_per_axis=561)


@pytest.fixture(scope="session")
def fubini_study(cp1, cp1_grid):
    return reference_field(cp1, cp1_grid)


@pytest.fixture(scope="session")
def fubini_study_wide(cp1, wide_grid):
    return reference_field(cp1, wide_grid)


@pytest.fixture(scope="session")
def fs_fields(fubini_study):
    return metric_fields(fubini_study)


@pytest.fixture(scope="session")
def bumped(cp1, cp1_grid):
    u = make_perturbation(cp1_grid, "bump", amplitude=0.3, width=1.5)
    return reference_field(cp1, cp1_grid).with_u(u)


@pytest.fixture(scope="session")
def bumped_wide(cp1, wide_grid):
    u = make_perturbation(wide_grid, "bump", amplitude=0.3, width=1.5)
    return reference_field(cp1, wide_grid).with_u(u)


@pytest.fixture(scope="session")
def cp1_large():
    return get_model("cp1", m_max=64)


@pytest.fixture(scope="session")
def tilted_wide(cp1_large, wide_grid):
    return perturbed_field(cp1_large, wide_grid, "algebraic", amplitude=-0.2)


@pytest.fixture(scope="session")
def cp1xcp1():
    return get_model("cp1xcp1", m_max=4)


@pytest.fixture(scope="session")
def square_grid():
    return Grid(half_width=14.0, points_per_axis=57, dimension=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_potential(rng):
    def make(model, grid, amplitude=0.3):
        u = make_perturbation(grid, "random", amplitude=amplitude, width=1.5, count=4, rng=rng)
        return reference_field(model, grid).with_u(u)

    return make
