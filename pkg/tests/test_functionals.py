from __future__ import annotations

import numpy as np
import pytest

from krflow.fields import metric_fields
from krflow.flow import FlowSettings, dirichlet_energy, make_state, run
from krflow.functionals import (
    cocycle_check,
    decay_detector,
    drift_bound,
    drift_check,
    f0_along_path,
    f0_energy,
    functional_ledger,
    j_functional,
    l_tilde,
    l_tilde_variation_check,
    ledger_columns,
    ledger_derivative,
    mabuchi_energy,
    mabuchi_rate,
    mabuchi_rate_pointwise,
    measured_constants,
    riemann_roch_remainder,
)
from krflow.geometry import get_model, reference_field


@pytest.fixture(scope="module")
def flow_run(bumped):
    return run(bumped, FlowSettings(horizon=0.4, sample_every=0.05))


@pytest.fixture(scope="module")
def ledger(flow_run):
    return functional_ledger(flow_run, [4])


def test_f0_vanishes_at_base_and_sees_constants(fubini_study):
    assert f0_energy(fubini_study) == 0.0
    assert f0_energy(fubini_study.shifted(0.5)) == pytest.approx(-0.5, rel=1e-12)


def test_f0_constant_in_two_dimensions(cp1xcp1, square_grid, random_potential):
    phi = random_potential(cp1xcp1, square_grid)
    assert f0_energy(phi.shifted(-0.3)) - f0_energy(phi) == pytest.approx(0.3, abs=1e-3)


def test_j_is_nonnegative_and_shift_invariant(cp1, cp1_grid, random_potential):
    for _ in range(3):
        phi = random_potential(cp1, cp1_grid)
        j = j_functional(phi)
        assert j > 0.0
        assert j_functional(phi.shifted(1.25)) == pytest.approx(j, rel=1e-7)


def test_j_is_positive_in_two_dimensions(cp1xcp1, square_grid, random_potential):
    assert j_functional(random_potential(cp1xcp1, square_grid)) > 0.0


def test_cocycle_and_path_independence(cp1, cp1_grid, random_potential):
    phi, psi, chi = (random_potential(cp1, cp1_grid) for _ in range(3))
    assert cocycle_check(phi, psi) < 1e-10
    assert cocycle_check(phi, psi, base=chi) < 1e-10
    direct = f0_energy(chi)
    start = reference_field(cp1, cp1_grid)
    assert f0_along_path([start, phi, psi, chi]) == pytest.approx(direct, abs=1e-10)
    assert f0_along_path([phi]) == 0.0


def test_mabuchi_rate_is_minus_dirichlet_energy(bumped):
    state = make_state(bumped)
    energy = dirichlet_energy(state.fields, state.phidot)
    assert energy > 0.0
    assert mabuchi_rate(state.fields, state.phidot) == pytest.approx(-energy, rel=1e-8)


def test_mabuchi_rates_vanish_at_kahler_einstein(fubini_study, fs_fields):
    phidot = make_state(fubini_study).phidot
    assert abs(mabuchi_rate(fs_fields, phidot)) < 1e-12
    assert abs(mabuchi_rate_pointwise(fs_fields, phidot)) < 1e-10


def test_mabuchi_energy_decreases_along_flow(flow_run):
    frame = mabuchi_energy(flow_run)
    assert frame["M"].iloc[0] == 0.0
    assert (frame["dM_dt"] <= 0.0).all()
    assert (np.diff(frame["M"]) <= 1e-14).all()


def test_l_tilde_gauge_and_constant_invariance(bumped, fubini_study):
    assert l_tilde(fubini_study, 4) == pytest.approx(0.0, abs=1e-12)
    value = l_tilde(bumped, 4)
    assert l_tilde(bumped.shifted(0.7), 4) == value
    moved = bumped.with_u(bumped.u + 0.4)
    assert l_tilde(moved, 4) == pytest.approx(value, abs=1e-8)


def test_functional_ledger_columns_and_start(ledger, flow_run):
    frame = ledger.frame
    assert list(frame.columns) == ledger_columns([4])
    assert len(frame) == len(flow_run.samples) == 9
    assert frame["F0"].iloc[0] == pytest.approx(0.0, abs=1e-14)
    assert frame["Ltilde_4"].iloc[0] == pytest.approx(0.0, abs=1e-12)
    assert (frame["J"] >= -1e-14).all()
    np.testing.assert_allclose(frame["drift_4"], frame["dLtilde_dt_an_4"] - 0.5 * frame["dM_dt"])
    assert set(ledger.details["m"]) == {4}


def test_l_tilde_rate_matches_finite_differences(ledger):
    check = l_tilde_variation_check(ledger, 4)
    assert check.max_relative < 5e-2
    assert check.max_relative_coarse > check.max_relative
    assert list(check.frame.columns) == ["t", "fd", "analytic", "relative_residual"]


def test_drift_tables(ledger, flow_run):
    bound = drift_bound(ledger.details, 4)
    assert list(bound.columns) == ["t", "predicted", "predicted_asymptotic"]
    assert (bound["predicted"] >= 0.0).all()
    table = drift_check(ledger)
    assert table["m"].tolist() == [4]
    assert table["max_drift"].iloc[0] >= 0.0
    constants = measured_constants(flow_run, ledger)
    assert constants["C0_4"] == pytest.approx(0.0, abs=1e-6)
    assert constants["C2_sup_phidot"] > 0.0


def test_riemann_roch_remainder():
    for m in (1, 2, 5):
        assert riemann_roch_remainder(2 * m + 1, 2.0, m, 1) == pytest.approx(0.0)
    model = get_model("bl1cp2", m_max=3)
    for m in (1, 2, 3):
        assert riemann_roch_remainder(model.n_sections(m), model.volume, m, 2) == pytest.approx(0.25)


def test_ledger_derivative_exact_for_quadratics():
    t = np.linspace(0.0, 2.0, 9)
    np.testing.assert_allclose(ledger_derivative(t, t**2), 2.0 * t, atol=1e-12)
    np.testing.assert_allclose(ledger_derivative(t[:2], t[:2]), [1.0, 1.0])


def test_decay_detector():
    t = np.linspace(0.0, 10.0, 101)
    decaying = decay_detector(t, 1.0 - 0.2 * t)
    assert decaying.verdict == "linear-decay"
    assert decaying.gamma == pytest.approx(0.2)
    bounded = decay_detector(t, -0.5 + 1e-3 * np.exp(-t))
    assert bounded.verdict == "bounded"
    assert bounded.gamma == 0.0
    with pytest.raises(ValueError):
        decay_detector([0.0, 1.0], [0.0, -1.0])


def test_decay_detector_flags_increasing_energy():
    t = np.linspace(0.0, 10.0, 101)
    rising = decay_detector(t, 0.2 * t)
    assert rising.verdict == "increasing"
    assert rising.slope == pytest.approx(0.2)
    assert np.isnan(rising.gamma)
    assert decay_detector(t, -0.2 * t).verdict == "linear-decay"


def test_pointwise_rate_uses_resolved_region(bumped):
    fields = metric_fields(bumped)
    phidot = make_state(bumped).phidot
    assert np.isfinite(mabuchi_rate_pointwise(fields, phidot))


def test_variation_check_converges_at_second_order(bumped):
    traj = run(bumped, FlowSettings(horizon=1.2, sample_every=0.1))
    check = l_tilde_variation_check(functional_ledger(traj, [4]), 4)
    assert check.max_relative < check.max_relative_coarse
    assert 1.5 <= check.order <= 2.6
