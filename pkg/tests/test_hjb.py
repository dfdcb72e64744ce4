import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fphjb.fp import fp_solve
from fphjb.grid import TimeGrid, build_mesh
from fphjb.hjb import ConstraintForcing, hamiltonian_argmax, hjb_solve, psi, value_gradient
from fphjb.model import (
    BoxSet,
    ControlBounds,
    ControlProblem,
    PvModel,
    lq_problem,
    lq_value,
    pv_problem,
)

B = ControlBounds()


@pytest.mark.parametrize("z, q, expected", [(1.5, 1.5, 0.0), (2.0, 1.0, 1.0), (0.0, 3.0, 3.0)])
def test_psi(z, q, expected):
    assert psi(z, q, B) == expected


@given(st.floats(-100, 100), st.floats(-100, 100))
def test_psi_is_max_over_box(z, q):
    grid = np.linspace(-1, 1, 3)
    assert psi(z, q, B) == pytest.approx(max(u * (z - q) for u in grid), abs=1e-12)


def pv_row(price, p3):
    y = np.array([[0.5, price, 2.0]])
    grad = np.array([[0.0, 0.0, p3]])
    return y, grad


@pytest.mark.parametrize("price, p3, expected", [(70.0, 65.0, 1.0), (70.0, 72.0, -1.0), (70.0, 70.0, 0.0)])
def test_pv_bang_bang_selector(price, p3, expected):
    prob = pv_problem(PvModel())
    y, grad = pv_row(price, p3)
    # the switching slope is a difference of two Hamiltonian values, so an exact
    # tie can land a few ulps either side of zero
    assert hamiltonian_argmax(12.0, y, grad, prob, tie_tol=1e-9)[0] == expected


def test_lq_selector():
    prob = lq_problem(0.5)
    # v_y = 6 in the minimization frame
    assert hamiltonian_argmax(0.0, np.array([[3.0]]), np.array([[-6.0]]), prob)[0] == pytest.approx(-3.0)


def test_value_gradient():
    m = build_mesh([(0, 1), (0, 2), (0, 3)], [4, 5, 6])
    g = value_gradient(3 * m.nodes[:, 0], m)
    assert np.allclose(g, [3, 0, 0])
    m1 = build_mesh([(-2, 2)], [401])
    g1 = value_gradient(m1.nodes[:, 0] ** 2, m1)[1:-1, 0]
    assert np.max(np.abs(g1 - 2 * m1.nodes[1:-1, 0])) <= 1e-10


def zero_problem():
    return ControlProblem(
        dim=1,
        drift=lambda s, y, u: np.asarray(u, dtype=float).reshape(-1, 1) + 0 * y,
        diffusion=lambda s, y: np.full((y.shape[0], 1, 1), 0.3),
        running_cost=lambda s, y, u: np.zeros(y.shape[0]),
        terminal_cost=lambda y: np.zeros(y.shape[0]),
        bounds=B,
        constraint=BoxSet.unbounded(1),
        horizon=(0.0, 1.0),
    )


def test_zero_rewards_zero_value():
    m = build_mesh([(-2, 2)], [21])
    v, u = hjb_solve(zero_problem(), None, m, TimeGrid(0, 1, 0.1))
    assert np.all(v.values == 0.0)
    assert np.all(np.isin(u.values, [-1.0, 0.0, 1.0]))


def test_lq_closed_form():
    sigma, T = 0.5, 4.0
    prob = lq_problem(sigma, (0.0, T))
    m = build_mesh([(-6, 6)], [241])
    tg = TimeGrid(0, T, 0.01)
    t0 = time.perf_counter()
    v, u = hjb_solve(prob, None, m, tg)
    assert time.perf_counter() - t0 < 30
    y = m.nodes[:, 0]
    inner = np.abs(y) <= 4.0
    assert np.max(np.abs(v.values[0] - lq_value(0.0, y, sigma, T))[inner]) <= 0.02
    assert np.max(np.abs(v.values[-1] - y**2)) == 0.0


def small_pv():
    model = PvModel()
    return model, pv_problem(model)


def test_pv_terminal_and_bang_bang():
    model, prob = small_pv()
    m = build_mesh([(-5, 5), (-40, 220), (-30, 40)], [6, 14, 15])
    tg = TimeGrid(0, 24, 2.0)
    v, u = hjb_solve(prob, None, m, tg)
    assert np.max(np.abs(v.values[-1] - prob.terminal_reward(m.nodes))) == 0.0
    assert np.all(np.isin(u.values, [-1.0, 0.0, 1.0]))
    # away from the switching surface the sign follows price minus marginal energy value
    for k in (0, 5):
        p3 = value_gradient(v.values[k + 1], m)[:, 2]
        sw = m.nodes[:, 1] - p3
        far = np.abs(sw) > 10 * m.spacing[1]
        assert np.array_equal(u.values[k][far], np.sign(sw[far]))


def test_forcing_lowers_marginal_energy_value():
    model, prob = small_pv()
    m = build_mesh([(-30, 40)], [71])
    # reduced-like check on the energy axis alone: a positive forcing on E lowers v_E
    prob1 = ControlProblem(
        dim=1,
        drift=lambda s, y, u: -np.asarray(u, dtype=float).reshape(-1, 1) + 0 * y,
        diffusion=lambda s, y: 0.1 * y.reshape(-1, 1, 1),
        running_cost=lambda s, y, u: 70.0 * np.asarray(u, dtype=float) + 0 * y[:, 0],
        terminal_cost=lambda y: 60.0 * y[:, 0],
        bounds=B,
        constraint=BoxSet((0.0,), (4.0,)),
        horizon=(0.0, 24.0),
    )
    tg = TimeGrid(0, 24, 0.5)
    over = np.full((tg.steps + 1, 1), 5.0)
    v0, _ = hjb_solve(prob1, None, m, tg)
    v1, _ = hjb_solve(prob1, ConstraintForcing(over, np.zeros_like(over), 1.0, prob1.constraint), m, tg)
    g0 = value_gradient(v0.values[10], m)[:, 0]
    g1 = value_gradient(v1.values[10], m)[:, 0]
    assert np.all(g1 < g0)


def test_unconstrained_output_ignores_density():
    prob = lq_problem(0.5, (0.0, 1.0))
    m = build_mesh([(-3, 3)], [31])
    tg = TimeGrid(0, 1, 0.1)
    f1 = ConstraintForcing(np.full((11, 1), 7.0), np.zeros((11, 1)), 1.0, prob.constraint)
    f2 = ConstraintForcing(np.full((11, 1), -3.0), np.zeros((11, 1)), 1.0, prob.constraint)
    assert np.array_equal(hjb_solve(prob, f1, m, tg)[0].values, hjb_solve(prob, f2, m, tg)[0].values)


@pytest.mark.parametrize("which", ["lq", "bang"])
def test_unconstrained_value_equals_fp_objective(which):
    """Discrete duality: E[v(0, X_0)] equals the forward evaluation of the same feedback.

    Holds exactly while the density stays off the mesh edge, where the forward
    and backward closures differ.
    """
    from fphjb.alm import fp_objective, initial_expected_value
    from fphjb.model import InitialDistribution

    if which == "lq":
        prob = lq_problem(0.5, (0.0, 1.0))
    else:
        prob = ControlProblem(
            dim=1,
            drift=lambda s, y, u: -np.asarray(u, dtype=float).reshape(-1, 1) + 0 * y,
            diffusion=lambda s, y: np.full((y.shape[0], 1, 1), 0.3),
            running_cost=lambda s, y, u: (1.0 + np.sin(s)) * np.asarray(u, dtype=float) + 0 * y[:, 0],
            terminal_cost=lambda y: 1.2 * y[:, 0],
            bounds=B,
            constraint=BoxSet.unbounded(1),
            horizon=(0.0, 1.0),
        )
    m = build_mesh([(-6, 6)], [61])
    tg = TimeGrid(0, 1, 0.05)
    v, u = hjb_solve(prob, None, m, tg)
    phi = fp_solve(prob, u, InitialDistribution((1.0,), (0.04,)), m, tg)
    assert initial_expected_value(v, phi) == pytest.approx(fp_objective(prob, phi, u), rel=1e-12)
