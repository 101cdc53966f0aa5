import math

import numpy as np
import pytest

from kuramoto_remote import (
    THRESHOLD_ALPHA,
    KuramotoStarParams,
    averaged_mu_rhs,
    frequency_gap,
    limit_cycle_residual,
    linearized_classification,
    manifold_distance,
    mu_zeta_field,
    observables_frame,
    phase_locked_equilibria,
    polar_observables,
    simulate_remote_sync_experiment,
    simulate_star,
    star_rhs,
    theta_from_mu_zeta,
    unequal_coupling_gap_check,
    wrap_angle,
    zeta_rate_lower_bound,
)
from lab_utils import DegenerateParameterError
from ode_core import IntegratorConfig, integrate, unstack

STAR_RK4 = IntegratorConfig(scheme="rk4_fixed", step=0.01)


def locked_start(alpha, mu0):
    return theta_from_mu_zeta(mu0, phase_locked_equilibria(alpha)["c_alpha"])


# -----------------------
# Phase equations
# -----------------------
def test_synchronized_star_without_shift_runs_at_omega():
    rates = star_rhs(KuramotoStarParams(omega=1.7, alpha=0.0, u=0.0), np.full(3, 0.4))
    np.testing.assert_allclose(rates, 1.7, atol=1e-15)


def test_swapping_the_peripherals_swaps_their_rates():
    p = KuramotoStarParams(alpha=0.7, u=2.0)
    rates = star_rhs(p, np.array([0.3, -1.1, 2.0]))
    swapped = star_rhs(p, np.array([0.3, 2.0, -1.1]))
    assert swapped[0] == pytest.approx(rates[0], abs=1e-15)
    assert swapped[1] == rates[2] and swapped[2] == rates[1]


def test_rates_match_a_hand_evaluation():
    rates = star_rhs(KuramotoStarParams(alpha=0.5), np.array([0.3, 0.0, 0.0]))
    peripheral = 1.0 + math.sin(0.3 - 0.5)
    np.testing.assert_allclose(rates, [1.0 + 2.0 * math.sin(-0.3 - 0.5), peripheral, peripheral], atol=1e-14)


def test_common_phase_shift_changes_nothing():
    p = KuramotoStarParams(alpha=0.9, u=4.0)
    rng = np.random.default_rng(17)
    for theta in rng.uniform(-np.pi, np.pi, (20, 3)):
        shift = rng.uniform(-10.0, 10.0)
        np.testing.assert_allclose(star_rhs(p, theta + shift), star_rhs(p, theta), atol=1e-12)
        a, b = polar_observables(theta), polar_observables(theta + shift)
        for name in ("z1", "z2", "r", "mu"):
            assert getattr(b, name) == pytest.approx(getattr(a, name), abs=1e-12), name


def test_equal_peripherals_stay_equal_over_a_long_run():
    p = KuramotoStarParams(alpha=0.9, u=10.0)
    traj = simulate_star(p, np.array([0.4, -1.0, -1.0]), 100.0, STAR_RK4)
    assert np.max(np.abs(wrap_angle(traj.states[:, 1] - traj.states[:, 2]))) < 1e-9


# -----------------------
# Observables
# -----------------------
def test_mu_zeta_lift_round_trips_through_the_observables():
    obs = polar_observables(theta_from_mu_zeta(0.2, 0.7, theta0=1.3))
    assert obs.mu == pytest.approx(0.2, abs=1e-14)
    assert obs.r == pytest.approx(0.8, abs=1e-14)
    assert obs.zeta == pytest.approx(0.7, abs=1e-14)
    assert not obs.degenerate


def test_antiphase_peripherals_are_degenerate():
    obs = polar_observables([0.0, math.pi / 2, -math.pi / 2], previous_zeta=0.4)
    assert obs.degenerate and obs.zeta == 0.4
    assert obs.mu == pytest.approx(1.0)


def test_manifold_distance_wraps_the_gap():
    d = manifold_distance([0.0, 2.0 * math.pi + 0.1, 0.0])
    assert d["euclidean"] == pytest.approx(0.1 / math.sqrt(2.0))
    assert d["mu"] == pytest.approx(1.0 - math.cos(0.05))


# -----------------------
# Linearization at the locked state
# -----------------------
def test_locked_eigenvalues_at_quarter_pi():
    cls = linearized_classification(math.pi / 4)
    np.testing.assert_allclose(cls.eig_M1, (-2.236068, -0.447214), atol=1e-6)
    assert cls.verdict_M1 == "stable"


@pytest.mark.parametrize("alpha,verdict", [(1.0, "stable"), (1.04, "stable"), (1.06, "unstable"), (1.1, "unstable")])
def test_locked_verdict_flips_at_pi_over_three(alpha, verdict):
    assert linearized_classification(alpha).verdict_M1 == verdict


def test_stable_lock_iff_alpha_below_threshold():
    for alpha in np.linspace(0.05, 1.5, 30):
        if abs(alpha - THRESHOLD_ALPHA) < 1e-3:
            continue
        cls = linearized_classification(alpha)
        assert (cls.verdict_M1 == "stable") == (alpha < THRESHOLD_ALPHA), f"alpha={alpha:.3f}"
        assert cls.verdict_M1prime == "unstable"


# -----------------------
# Simulated decay rates
# -----------------------
def test_locked_decay_rates_match_the_linearization():
    p = KuramotoStarParams(alpha=0.9, u=0.0)
    rep = simulate_remote_sync_experiment(p, locked_start(0.9, 1e-3), 60.0, STAR_RK4)
    assert rep.gap_fit.accepted and rep.mu_fit.accepted
    assert rep.gap_fit.rate_lambda == pytest.approx(0.2694, rel=1e-2)
    assert rep.mu_fit.rate_lambda == pytest.approx(0.539, rel=1e-2)
    assert rep.classification.verdict_M1 == "stable"
    assert rep.averaged_audit is None


@pytest.mark.parametrize("alpha", [0.3, 0.9, 1.4])
def test_detuned_mu_decays_at_the_averaged_rate(alpha):
    p = KuramotoStarParams(alpha=alpha, u=10.0)
    rep = simulate_remote_sync_experiment(p, theta_from_mu_zeta(0.1, 0.0), 100.0, STAR_RK4)
    assert rep.mu_fit is not None and rep.mu_fit.accepted, rep.fit_errors
    mu_hat = 1e-3
    predicted = -averaged_mu_rhs(mu_hat, p).f_av[0] / (2.0 * math.pi * mu_hat)
    assert 0.7 * predicted <= rep.mu_fit.rate_lambda <= 1.3 * predicted, \
        f"fitted {rep.mu_fit.rate_lambda:.4g}, averaged {predicted:.4g}"


# -----------------------
# Averaged mu dynamics
# -----------------------
@pytest.mark.parametrize("u,alpha", [(3.5, 1.2), (4.0, 0.3), (5.0, 0.9), (10.0, 1.4), (20.0, 0.7)])
def test_closed_form_average_matches_quadrature(u, alpha):
    rep = averaged_mu_rhs(np.linspace(0.0, 0.95, 50), KuramotoStarParams(alpha=alpha, u=u))
    np.testing.assert_allclose(rep.quadrature, rep.f_av, rtol=1e-8, atol=1e-12)


def test_averaged_mu_field_is_negative_and_bounded_away():
    rep = averaged_mu_rhs(np.linspace(0.0, 0.99, 100), KuramotoStarParams(alpha=0.9, u=10.0))
    assert rep.negative_ok and rep.rate_bound_ok
    assert rep.c > 0


def test_averaging_needs_a_fast_angle():
    with pytest.raises(DegenerateParameterError):
        averaged_mu_rhs(0.1, KuramotoStarParams(u=3.0))


def test_zeta_rate_stays_above_u_minus_three_a():
    rep = zeta_rate_lower_bound(KuramotoStarParams(alpha=0.9, u=10.0))
    assert rep["ok"] and rep["min_rate"] >= 7.0


@pytest.mark.slow
@pytest.mark.parametrize("alpha", [0.5, 0.9])
def test_reduced_mu_zeta_flow_matches_the_phase_flow(alpha):
    p = KuramotoStarParams(alpha=alpha, u=10.0)
    cfg = IntegratorConfig(scheme="rk4_fixed", step=1e-3)
    rng = np.random.default_rng(3)
    mu0, zeta0 = rng.uniform(0.05, 0.5, 5), rng.uniform(-3.0, 3.0, 5)
    theta0 = np.column_stack([theta_from_mu_zeta(m, z) for m, z in zip(mu0, zeta0)])
    phases = unstack(simulate_star(p, theta0, 50.0, cfg), 5)
    reduced = unstack(integrate(mu_zeta_field(p, 5), np.concatenate([mu0, zeta0]), (0.0, 50.0), cfg), 5)
    for j in range(5):
        obs = observables_frame(phases[j], p)
        np.testing.assert_allclose(obs["mu"], reduced[j].states[:, 0], atol=1e-6)
        np.testing.assert_allclose(obs["zeta"], reduced[j].states[:, 1], atol=1e-5)


# -----------------------
# Detuned regime and asymmetric couplings
# -----------------------
def test_detuned_frequencies_settle_on_the_ellipse():
    p = KuramotoStarParams(alpha=1.3, u=10.0)
    traj = simulate_star(p, theta_from_mu_zeta(0.01, 0.0), 100.0, STAR_RK4)
    obs = observables_frame(traj, p)
    late = obs[obs["t"] >= 60.0]
    assert late["cycle_residual"].abs().max() < 1e-3
    assert frequency_gap(traj, p) > 1.0


def test_locked_frequencies_coincide():
    p = KuramotoStarParams(alpha=0.9, u=0.0)
    traj = simulate_star(p, locked_start(0.9, 1e-3), 60.0, STAR_RK4)
    assert abs(frequency_gap(traj, p)) < 1e-3


def test_unequal_couplings_keep_a_bounded_nonzero_gap():
    p = KuramotoStarParams(A1=1.0, A2=1.02, alpha=0.9, u=0.0)
    rep = unequal_coupling_gap_check(p, locked_start(0.9, 1e-3), horizon=200.0,
                                     cfg=IntegratorConfig(scheme="rk4_fixed", step=0.02))
    assert rep["bounded"]
    assert rep["late_min_gap"] > 0.01


@pytest.mark.parametrize("kwargs", [{"A1": 0.0}, {"alpha": 2.0}, {"u": -1.0}])
def test_invalid_parameters_raise(kwargs):
    with pytest.raises(DegenerateParameterError):
        KuramotoStarParams(**kwargs)


def test_reduction_needs_symmetric_couplings():
    with pytest.raises(DegenerateParameterError):
        KuramotoStarParams(A2=1.5).A


def test_zero_mu_exactly_when_the_peripherals_coincide():
    rng = np.random.default_rng(5)
    on = rng.uniform(-np.pi, np.pi, (30, 3))
    on[:, 2] = on[:, 1] + 2.0 * np.pi * rng.integers(-3, 4, 30)
    off = rng.uniform(-np.pi, np.pi, (30, 3))
    off[:, 2] = off[:, 1] + rng.choice([-1.0, 1.0], 30) * rng.uniform(1e-3, np.pi, 30)
    for theta in np.vstack([on, off]):
        gap = abs(float(wrap_angle(theta[1] - theta[2])))
        assert (polar_observables(theta).mu <= 1e-10) == (gap <= 1e-10), f"gap={gap:.3g}"


def test_order_parameter_pair_lies_on_the_circle_of_radius_r():
    rng = np.random.default_rng(9)
    for theta in rng.uniform(-np.pi, np.pi, (50, 3)):
        obs = polar_observables(theta)
        assert obs.z1 ** 2 + obs.z2 ** 2 == pytest.approx(obs.r ** 2, abs=1e-12)
        assert obs.r == pytest.approx(0.5 * math.sqrt(2.0 + 2.0 * math.cos(theta[1] - theta[2])), abs=1e-12)


@pytest.mark.parametrize("alpha", [0.0, 0.3, math.pi / 4, 0.9, 1.3])
def test_locked_states_are_equilibria_of_the_phase_gaps(alpha):
    eq = phase_locked_equilibria(alpha)
    assert eq["c_prime_alpha"] == pytest.approx(math.pi + eq["c_alpha"])
    for key in ("c_alpha", "c_prime_alpha"):
        c = eq[key]
        rates = star_rhs(KuramotoStarParams(alpha=alpha), np.array([0.0, -c, -c]))
        assert rates[0] - rates[1] == pytest.approx(0.0, abs=1e-12), key
    if alpha == math.pi / 4:
        assert eq["c_alpha"] == pytest.approx(-0.321751, abs=1e-6)


def test_ellipse_points_and_centre_of_the_frequency_cycle():
    p = KuramotoStarParams(alpha=1.3, u=10.0)
    phi = np.linspace(0.0, 2.0 * np.pi, 13)
    total = 3.0 * p.omega + p.u + 4.0 * math.sin(p.alpha) * np.sin(phi)
    diff = p.omega - p.u + 4.0 * math.cos(p.alpha) * np.cos(phi)
    np.testing.assert_allclose(limit_cycle_residual(0.5 * (total + diff), 0.5 * (total - diff), p), 0.0, atol=1e-12)
    centre = limit_cycle_residual(0.5 * (3.0 * p.omega + p.u + p.omega - p.u), 0.5 * (3.0 * p.omega + p.u - p.omega + p.u), p)
    assert centre == pytest.approx(-1.0, abs=1e-15)


def test_ellipse_degenerates_without_phase_shift():
    with pytest.raises(DegenerateParameterError):
        limit_cycle_residual(1.0, 1.0, KuramotoStarParams(alpha=0.0))
