import math

import numpy as np
import pytest

from averaging import (
    AveragedSystem,
    average_reduced,
    averaging_defect,
    change_of_variables_gap,
    composite_gauss_legendre,
    defect_integral,
    estimate_jacobian_bounds,
    invert_change_of_variables,
)
from ode_core import IntegratorConfig
from slowfast import DomainBox, ReducedSystem, example1, reduce_to_fast_axis, simulate_reduced


def example1_h_av(w, v):
    """Mean over z of h1 = f1/f3; the 2 cos z term averages out because f3 does not depend on z."""
    return -w * (1.0 + 0.2 * np.sin(v)) / (3.0 - np.sin(w) + np.cos(v))


def test_composite_rule_is_exact_for_degree_fifteen():
    pts, wts = composite_gauss_legendre(0.0, 2.0, 8)
    assert np.sum(wts * pts ** 15) == pytest.approx(2.0 ** 16 / 16.0, rel=1e-13)


def test_composite_rule_accepts_array_limits():
    pts, wts = composite_gauss_legendre(np.zeros(3), np.array([1.0, 2.0, 3.0]), 16)
    assert pts.shape == (3, 16)
    np.testing.assert_allclose(np.sum(wts, axis=-1), [1.0, 2.0, 3.0], rtol=1e-14)


@pytest.mark.parametrize("nodes", [0, 4, 7])
def test_fewer_than_eight_nodes_are_rejected(nodes):
    with pytest.raises(ValueError):
        composite_gauss_legendre(0.0, 1.0, nodes)


def test_odd_node_counts_use_one_panel_of_that_order():
    pts, wts = composite_gauss_legendre(0.0, 1.0, 12)
    assert pts.shape == (12,)
    assert np.sum(wts * pts ** 23) == pytest.approx(1.0 / 24.0, rel=1e-13)


def test_example1_average_matches_closed_form(example1_reduced):
    av = average_reduced(example1_reduced)
    W, V = np.meshgrid(np.linspace(-0.3, 0.3, 20), np.linspace(-np.pi, np.pi, 20), indexing="ij")
    got = av.h_av(W.ravel()[None], V.ravel()[None])[0]
    np.testing.assert_allclose(got, example1_h_av(W.ravel(), V.ravel()), atol=1e-10)


def test_averaged_field_keeps_the_unaveraged_v_block(example1_reduced):
    av = AveragedSystem(example1_reduced, 32)
    state = np.array([[0.2], [0.4]])
    out = av.field(state, 1.1)
    assert out.shape == (2, 1)
    assert out[0, 0] == pytest.approx(0.05 * example1_h_av(0.2, 0.4), rel=1e-12)
    assert out[1, 0] == pytest.approx(0.05 * (0.4 * math.cos(0.4) + 0.2 * math.sin(1.1)) / (3.0 - math.sin(0.2) + math.cos(0.4)), rel=1e-12)


def test_defect_vanishes_over_a_full_period(example1_reduced):
    av = average_reduced(example1_reduced)
    T = example1_reduced.period_T
    u = defect_integral(example1_reduced, av, np.array([0.25]), np.array([0.6]), T * (1.0 - 1e-12))
    assert abs(u[0]) < 1e-9


def test_defect_respects_its_lipschitz_bound(example1_reduced):
    av = average_reduced(example1_reduced)
    bounds = estimate_jacobian_bounds(example1_reduced, DomainBox.ball_box(1, 1, 0.3), samples=512)
    assert bounds.L1 > 0
    rep = averaging_defect(example1_reduced, av, 0.2, 0.7, 3.0, bounds)
    assert rep.norm > 0
    assert rep.within_bound, f"||u||={rep.norm:.3g} above {rep.bound:.3g}"


def test_defect_rejects_negative_z(example1_reduced):
    av = average_reduced(example1_reduced)
    with pytest.raises(ValueError):
        defect_integral(example1_reduced, av, np.array([0.1]), np.array([0.0]), -1.0)


def test_change_of_variables_inverts_to_round_off():
    red = reduce_to_fast_axis(example1(0.01))
    av = average_reduced(red)
    x, y, z = np.array([0.2]), np.array([0.3]), 2.0
    inv = invert_change_of_variables(red, av, x, y, z)
    assert inv.converged
    back = inv.w + red.epsilon * defect_integral(red, av, inv.w, y, z)
    np.testing.assert_allclose(back, x, atol=1e-12)


def test_gap_along_a_reduced_trajectory_stays_order_epsilon():
    red = reduce_to_fast_axis(example1(0.05))
    av = average_reduced(red, 32)
    bounds = estimate_jacobian_bounds(red, DomainBox.ball_box(1, 1, 0.3), samples=512)
    traj = simulate_reduced(red, [0.2], [0.4], 0.0, 20.0, IntegratorConfig(rtol=1e-9, atol=1e-11))
    gap = change_of_variables_gap(red, av, traj, bounds)
    assert gap.converged
    assert 0 < gap.max_gap < 0.2
    assert gap.max_ratio <= 1.0, f"gap exceeds eps*2T*L1*||w_p|| by {gap.max_ratio:.3g}x"


def linear_reduced(A):
    A = np.asarray(A, dtype=float)

    def h1(x, y, z):
        return np.einsum("ij,j...->i...", A, x)

    def h2(x, y, z):
        return np.zeros_like(y)

    return ReducedSystem(h1, h2, 1.0, 2.0 * np.pi, A.shape[0], 1, "linear")


def test_linear_field_has_its_matrix_norm_as_lipschitz_constant():
    A = [[-1.0, 0.5], [0.2, -2.0]]
    bounds = estimate_jacobian_bounds(linear_reduced(A), DomainBox.ball_box(2, 1, 0.3), samples=256)
    assert bounds.L1 == pytest.approx(np.linalg.norm(A, 2), abs=1e-6)
    assert bounds.L2 == 0.0 and bounds.L1_prime == 0.0


def test_v_lipschitz_bound_scales_with_w():
    red = ReducedSystem(lambda x, y, z: x * np.sin(y), lambda x, y, z: np.zeros_like(y), 1.0, 2.0 * np.pi, 1, 1, "x_sin_v")
    bounds = estimate_jacobian_bounds(red, DomainBox.ball_box(1, 1, 0.3), samples=256)
    assert bounds.L1_prime == pytest.approx(1.0, abs=1e-6)
    assert bounds.L1 <= 1.0 + 1e-6


def test_average_vanishes_on_the_partial_equilibrium(example1_reduced):
    v = np.linspace(-np.pi, np.pi, 25)[None]
    np.testing.assert_allclose(average_reduced(example1_reduced).h_av(np.zeros_like(v), v), 0.0, atol=1e-12)


@pytest.mark.parametrize("shift", [0.7, math.pi, 5.0])
def test_average_does_not_depend_on_where_the_period_starts(example1_reduced, shift):
    W, V = np.meshgrid(np.linspace(-0.3, 0.3, 7), np.linspace(-np.pi, np.pi, 7), indexing="ij")
    w, v = W.ravel()[None], V.ravel()[None]
    base = AveragedSystem(example1_reduced, 64).h_av(w, v)
    np.testing.assert_allclose(AveragedSystem(example1_reduced, 64, shift).h_av(w, v), base, atol=1e-10)


def test_doubling_the_nodes_leaves_the_average_unchanged(example1_reduced):
    W, V = np.meshgrid(np.linspace(-0.3, 0.3, 7), np.linspace(-np.pi, np.pi, 7), indexing="ij")
    w, v = W.ravel()[None], V.ravel()[None]
    coarse = average_reduced(example1_reduced, 64).h_av(w, v)
    np.testing.assert_allclose(average_reduced(example1_reduced, 128).h_av(w, v), coarse, atol=1e-10)
