import math

import numpy as np
import pytest

from lab_utils import ConfigValidationError, NonFiniteStateError, OutOfRangeQuery, StepLimitExceeded
from ode_core import IntegratorConfig, Trajectory, advance, integrate, reverse_field, sample_at, unstack


def decay(y, t):
    return -y


def oscillator(y, t):
    return np.array([y[1], -y[0]])


def spiral(y, t):
    # commutes with every rotation of the plane
    return np.array([-y[0] + 2.0 * y[1], -2.0 * y[0] - y[1]])


def rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def rk4_error(step):
    traj = integrate(decay, [1.0], (0.0, 1.0), IntegratorConfig(scheme="rk4_fixed", step=step))
    return abs(traj.states[-1, 0] - math.exp(-1.0))


def test_rk4_converges_with_order_four():
    errs = [rk4_error(h) for h in (0.1, 0.05, 0.025)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert all(3.8 < p < 4.2 for p in orders), f"observed orders {orders}"


def test_adaptive_rkf45_tracks_the_harmonic_oscillator(precise):
    traj = integrate(oscillator, [1.0, 0.0], (0.0, 10.0), precise)
    np.testing.assert_allclose(traj.states[-1], [math.cos(10.0), -math.sin(10.0)], atol=1e-7)
    assert traj.meta["steps"] > 10


def test_rotated_initial_state_gives_rotated_trajectory():
    cfg = IntegratorConfig(scheme="rk4_fixed", step=0.01)
    y0 = np.array([0.7, -0.2])
    R = rotation(0.9)
    base = integrate(spiral, y0, (0.0, 3.0), cfg)
    turned = integrate(spiral, R @ y0, (0.0, 3.0), cfg)
    np.testing.assert_allclose(turned.states, base.states @ R.T, atol=1e-12)


def test_dense_output_is_exact_at_nodes_and_accurate_between(precise):
    traj = integrate(oscillator, [1.0, 0.0], (0.0, 5.0), precise)
    np.testing.assert_array_equal(sample_at(traj, traj.times[7]), traj.states[7])
    mids = 0.5 * (traj.times[1:] + traj.times[:-1])
    np.testing.assert_allclose(traj.sample_at(mids)[:, 0], np.cos(mids), atol=1e-4)


def test_query_outside_the_span_raises(precise):
    traj = integrate(decay, [1.0], (0.0, 1.0), precise)
    with pytest.raises(OutOfRangeQuery):
        sample_at(traj, 1.5)


def test_step_budget_is_enforced():
    with pytest.raises(StepLimitExceeded):
        integrate(decay, [1.0], (0.0, 1.0), IntegratorConfig(scheme="rk4_fixed", step=1e-3, max_steps=10))


def test_non_finite_field_reports_the_component():
    with pytest.raises(NonFiniteStateError) as info:
        integrate(lambda y, t: np.full_like(y, np.nan), [1.0, 2.0], (0.0, 1.0), IntegratorConfig())
    assert info.value.index == 0


def test_invalid_config_lists_every_problem():
    with pytest.raises(ConfigValidationError) as info:
        IntegratorConfig(scheme="euler", step=-1.0)
    assert len(info.value.errors) == 2, info.value.errors


def test_endpoints_only_keeps_two_nodes(precise):
    traj = integrate(decay, [1.0], (0.0, 2.0), precise, endpoints_only=True)
    assert len(traj) == 2
    assert traj.states[-1, 0] == pytest.approx(math.exp(-2.0), rel=1e-8)


def test_advance_runs_backward_with_negative_step(precise):
    back = advance(decay, [1.0], 0.0, -1.0, precise)
    assert back[0] == pytest.approx(math.e, rel=1e-8)


def test_unstack_splits_a_batched_run(precise):
    traj = integrate(decay, np.array([[1.0, 2.0]]).ravel(), (0.0, 1.0), precise)
    members = unstack(traj, 2)
    assert len(members) == 2
    assert members[1].states[-1, 0] == pytest.approx(2.0 * math.exp(-1.0), rel=1e-8)
    assert members[1].meta["member"] == 1


def test_trajectory_rejects_unsorted_times():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 2.0, 1.0]), np.zeros((3, 1)), np.zeros((3, 1)))


def test_frame_header_starts_with_axis(precise):
    traj = integrate(oscillator, [1.0, 0.0], (0.0, 1.0), precise)
    assert list(traj.to_frame().columns) == ["axis", "x0", "x1"]


def test_zero_field_gives_a_constant_trajectory(precise):
    for cfg in (precise, IntegratorConfig(scheme="rk4_fixed", step=0.1)):
        traj = integrate(lambda y, t: np.zeros_like(y), [0.3, -1.2], (0.0, 2.0), cfg)
        np.testing.assert_array_equal(traj.states, np.tile([0.3, -1.2], (len(traj), 1)))


def test_hermite_reproduces_a_linear_trajectory():
    traj = integrate(lambda y, t: np.ones_like(y), [0.0], (0.0, 3.0), IntegratorConfig(scheme="rk4_fixed", step=1.0))
    assert sample_at(traj, 0.5)[0] == pytest.approx(0.5, abs=1e-12)
    q = np.linspace(0.0, 3.0, 37)
    np.testing.assert_allclose(traj.sample_at(q)[:, 0], q, atol=1e-12)


def test_forward_then_backward_returns_to_the_start(precise):
    y0 = np.array([0.7, -0.2])
    end = integrate(spiral, y0, (0.0, 2.0), precise).states[-1]
    back = integrate(reverse_field(spiral), end, (-2.0, 0.0), precise).states[-1]
    np.testing.assert_allclose(back, y0, atol=1e-8)
    np.testing.assert_allclose(advance(spiral, advance(spiral, y0, 0.0, 2.0, precise), 2.0, -2.0, precise), y0, atol=1e-8)


@pytest.mark.parametrize("rhs,y0", [(decay, [1.0]), (oscillator, [1.0, 0.0]), (spiral, [0.7, -0.2])])
def test_adaptive_and_fixed_schemes_agree(rhs, y0, precise):
    fixed = integrate(rhs, y0, (0.0, 3.0), IntegratorConfig(scheme="rk4_fixed", step=1e-3)).states[-1]
    adaptive = integrate(rhs, y0, (0.0, 3.0), precise).states[-1]
    np.testing.assert_allclose(adaptive, fixed, atol=1e-8)
