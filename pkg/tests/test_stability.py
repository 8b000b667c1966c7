from __future__ import annotations

import math

import numpy as np
import pytest

from krflow.bergman import orthonormal_basis
from krflow.functionals import l_tilde
from krflow.stability import (
    PROBE_COLUMNS,
    DiagonalGroupElement,
    admissible_range,
    algebraic_potential,
    amgm_bound_check,
    chain_links,
    jensen_identity_check,
    psi_potential,
    random_weights,
    ray_probe,
)

M = 4
N = 2 * M + 1
SLACK_FLOOR = -1e-9


@pytest.fixture(scope="module")
def fs_basis(fubini_study):
    return orthonormal_basis(fubini_study, M)


@pytest.fixture(scope="module")
def bumped_basis(bumped):
    return orthonormal_basis(bumped, M)


@pytest.fixture
def ray(rng):
    return random_weights(N, rng)


def test_group_element_algebra(ray):
    tau = DiagonalGroupElement(m=M, weights=ray, s=0.8)
    assert tau.unimodular
    assert DiagonalGroupElement(m=M, weights=np.zeros(N)).trace_norm == pytest.approx(N)
    scaled = tau.scaled(0.3)
    assert scaled.log_abs_det == pytest.approx(0.3 * N)
    assert scaled.normalized().unimodular
    np.testing.assert_allclose(np.diag(tau.matrix()), np.exp(tau.log_entries))
    assert tau.at(0.0).trace_norm == pytest.approx(N)
    with pytest.raises(ValueError):
        DiagonalGroupElement(m=M, weights=np.array([np.nan] * N))


def test_random_weights_have_zero_sum(rng):
    a = random_weights(7, rng)
    assert a.shape == (7,)
    assert a.sum() == pytest.approx(0.0, abs=1e-12)


def test_algebraic_potential_identity_and_relative(bumped, bumped_basis, ray):
    identity = algebraic_potential(DiagonalGroupElement(m=M, weights=np.zeros(N)), bumped, basis=bumped_basis)
    np.testing.assert_allclose(identity.phi_tau, 0.0, atol=1e-14)
    alg = algebraic_potential(DiagonalGroupElement(m=M, weights=ray, s=0.7), bumped, basis=bumped_basis)
    np.testing.assert_allclose(alg.psi_relative, alg.psi.values() - bumped.values(), atol=1e-10)


def test_psi_potential_checks_size(fubini_study, fs_basis):
    with pytest.raises(ValueError, match="entries"):
        psi_potential(fubini_study, fs_basis, DiagonalGroupElement(m=M, weights=np.zeros(N - 1)))


def test_jensen_identity(bumped, ray):
    for s in (-0.8, 0.0, 0.8):
        check = jensen_identity_check(DiagonalGroupElement(m=M, weights=ray, s=s), bumped)
        assert check.relative_residual < 1e-10
        assert check.slack >= SLACK_FLOOR
    identity = jensen_identity_check(DiagonalGroupElement(m=M, weights=np.zeros(N)), bumped)
    assert identity.expected == pytest.approx(N)


def test_amgm_bound(bumped, bumped_basis, ray):
    check = amgm_bound_check(DiagonalGroupElement(m=M, weights=ray, s=0.6), bumped, basis=bumped_basis)
    assert check.slack >= SLACK_FLOOR
    assert math.isfinite(check.c_psi)


def test_chain_links_at_base_are_trivial(bumped, bumped_basis):
    links = chain_links(bumped, M, bumped, base_basis=bumped_basis)
    assert links.l_tilde == pytest.approx(0.0, abs=1e-12)
    assert links.log_abs_det_tau == pytest.approx(0.0, abs=1e-12)
    assert links.n_sections == N
    assert max(links.residuals.values()) < 1e-8


def test_chain_links_along_a_ray(bumped, bumped_basis, ray):
    alg = algebraic_potential(DiagonalGroupElement(m=M, weights=ray, s=0.8), bumped, basis=bumped_basis)
    links = chain_links(alg.psi, M, bumped, base_basis=bumped_basis)
    assert links.jensen_integral == pytest.approx(N, rel=1e-10)
    for name in ("l_tilde_split", "f0_cocycle", "unimodular_rescale", "fs_cocycle"):
        assert links.residuals[name] < 1e-8, name
    for name, slack in links.slacks.items():
        assert slack >= SLACK_FLOOR, name


def test_l_tilde_ignores_scalar_multiples_of_tau(bumped, bumped_basis, ray):
    tau = DiagonalGroupElement(m=M, weights=ray, s=0.5)
    plain = l_tilde(psi_potential(bumped, bumped_basis, tau), M, base=bumped)
    scaled = l_tilde(psi_potential(bumped, bumped_basis, tau.scaled(0.3)), M, base=bumped)
    assert scaled == pytest.approx(plain, abs=1e-9)


def test_identity_ray_is_flat(fubini_study, fs_basis):
    profile = ray_probe(np.zeros(N), np.linspace(-1.0, 1.0, 5), M, fubini_study, basis=fs_basis)
    assert list(profile.frame.columns) == PROBE_COLUMNS
    assert profile.truncated == 0
    assert profile.admissible == (-1.0, 1.0)
    np.testing.assert_allclose(profile.frame["Ltilde"], 0.0, atol=1e-10)
    assert profile.min_slack() >= SLACK_FLOOR


def test_random_ray_profile(bumped, bumped_basis, ray):
    profile = ray_probe(ray, np.linspace(-1.0, 1.0, 5), M, bumped, basis=bumped_basis)
    assert len(profile.frame) == 5
    assert np.isfinite(profile.minimum)
    assert profile.argmin in set(profile.frame["s"])
    assert profile.min_slack() >= SLACK_FLOOR
    assert (profile.frame["jensen_residual"] < 1e-10).all()
    np.testing.assert_allclose(profile.frame["log_det_tau"], 0.0, atol=1e-12)


def test_extreme_rays_are_truncated(fubini_study, fs_basis):
    weights = np.zeros(N)
    weights[0], weights[-1] = -1.0, 1.0
    lo, hi = admissible_range(weights, M, fubini_study, s_max=40.0, basis=fs_basis)
    assert -40.0 < lo < 0.0 < hi < 40.0
    profile = ray_probe(weights, [-40.0, 0.0, 40.0], M, fubini_study, basis=fs_basis)
    assert profile.truncated == 2
    assert profile.frame["s"].tolist() == [0.0]
