import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from das2 import autodiff as ad
from das2.nets import Ansatz, branch_trunk_init, mlp_init
from das2.optim import AdamState, adam_step
from das2.problems import (
    OpLearnCheb,
    ParamODE,
    StepSizeUnderflow,
    chebyshev_rhs,
    chebyshev_t,
    dopri5,
    exact_param_ode,
    make_problem,
    marginal_residual,
    residual_oplearn,
    residual_param_ode,
    residual_values,
    rk45_oracle,
    sample_ball,
)


def zeroed(s):
    return s.with_params([np.zeros_like(p) for p in s.params()])


def fd_dx(net, pts, h=1e-6):
    e = np.zeros(pts.shape[1])
    e[0] = h
    return (net(pts + e) - net(pts - e)) / (2 * h)


# -- parametric ODE -------------------------------------------------------------


def test_constant_surrogate_residuals():
    one = zeroed(mlp_init([2, 4, 1], 0, Ansatz("ic_shift", 1.0)))
    assert residual_param_ode(one, 0.3, 0.0)[0] == 0.0
    np.testing.assert_array_equal(residual_param_ode(one, [0.0, 0.4, 1.0], [2.0] * 3), -2.0)


def test_param_ode_residual_matches_finite_differences(rng):
    net = mlp_init([2, 8, 1], 1, Ansatz("ic_shift", 1.0))
    pts = rng.uniform([0, -3], [1, 3], size=(40, 2))
    r = residual_param_ode(net, pts[:, 0], pts[:, 1])
    expected = fd_dx(net, pts) - pts[:, 1] * net(pts)
    np.testing.assert_allclose(r, expected, atol=1e-5)


def test_param_ode_needs_ic_shift():
    with pytest.raises(ValueError):
        residual_param_ode(mlp_init([2, 1], 0, Ansatz("ic_zero")), 0.1, 0.1)


def test_exact_solution_values():
    assert exact_param_ode(0.0, 2.7) == 1.0
    assert exact_param_ode(0.8, 0.0) == 1.0
    assert exact_param_ode(1.0, 3.0) == pytest.approx(20.0855369, rel=1e-8)


def test_exact_solution_has_zero_residual(rng):
    p = ParamODE(u0=1.3)
    pts = rng.uniform([0, -3], [1, 3], size=(50, 2))
    h = 1e-6
    du = (p.exact(pts + [h, 0]) - p.exact(pts - [h, 0])) / (2 * h)
    np.testing.assert_allclose(du - pts[:, 1] * p.exact(pts), 0.0, atol=1e-6)


def test_residual_consistent_with_supervised_error():
    """A surrogate fit to exact values has mean squared residual within a fixed factor of its MSE."""
    p = ParamODE()
    g = np.linspace(0, 1, 21)
    h = np.linspace(-3, 3, 21)
    X, Y = np.meshgrid(g, h, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    ref = p.exact(pts)[:, None]
    net = mlp_init([2, 16, 16, 1], 0, Ansatz("ic_shift", 1.0))
    params, state = net.params(), AdamState()
    for _ in range(3000):
        tape = ad.Tape()
        pv = [tape.param(q) for q in params]
        loss = ad.sum(ad.square(net.forward(pv, pts).primal - ref)) * (1 / len(pts))
        params, state = adam_step(params, tape.gradient(loss), state, lr=3e-3)
    net = net.with_params(params)
    eps = np.mean((net(pts) - ref.ravel()) ** 2)
    r2 = np.mean(residual_values(p, net, pts) ** 2)
    assert eps < 1e-3
    assert r2 <= 1450 * eps  # recorded ratio 1159 on the reference run


# -- Chebyshev right-hand side --------------------------------------------------


def test_rhs_at_right_end():
    for d in (1, 5, 8):
        assert chebyshev_rhs(1.0, np.full(d, 0.5), 6.0) == pytest.approx(0.5 * d, abs=1e-14)


def test_rhs_zero_parameters():
    np.testing.assert_array_equal(chebyshev_rhs(np.linspace(0, 1, 7)[:, None], np.zeros((1, 4)), 6.0), 0.0)


def test_rhs_at_left_end_alternates():
    for d in (3, 4, 8):
        expected = 0.5 * sum((-1) ** i for i in range(d))
        assert chebyshev_rhs(0.0, np.full(d, 0.5), 6.0) == pytest.approx(expected, abs=1e-14)


@given(t=st.floats(-1, 1), degree=st.integers(1, 12))
def test_chebyshev_recurrence_matches_closed_form(t, degree):
    T = chebyshev_t(t, degree)
    closed = np.cos(np.arange(degree) * np.arccos(t))
    np.testing.assert_allclose(T, closed, atol=1e-12)


# -- operator-learning residual -------------------------------------------------


def test_zero_surrogate_oplearn_residuals(rng):
    s = zeroed(branch_trunk_init([1, 4, 3], [5, 4, 3], 0, Ansatz("ic_zero")))
    assert residual_oplearn(s, 0.3, np.zeros(5))[0] == 0.0
    xi = rng.uniform(-1, 1, size=(6, 5))
    x = rng.uniform(size=6)
    np.testing.assert_allclose(residual_oplearn(s, x, xi), -chebyshev_rhs(x, xi, 6.0), atol=1e-15)


def test_oplearn_residual_matches_finite_differences(rng):
    s = branch_trunk_init([1, 6, 4], [3, 6, 4], 2, Ansatz("ic_zero"))
    x = rng.uniform(0.05, 0.95, size=30)
    xi = rng.uniform(-1, 1, size=(30, 3))
    pts = np.column_stack([x, xi])
    expected = fd_dx(s, pts) - chebyshev_rhs(x, xi, 6.0)
    np.testing.assert_allclose(residual_oplearn(s, x, xi), expected, atol=1e-5)


def test_oplearn_residual_needs_ic_zero():
    s = branch_trunk_init([1, 3, 2], [2, 3, 2], 0, Ansatz("ic_shift", 1.0))
    with pytest.raises(ValueError):
        residual_oplearn(s, 0.5, [[0.1, 0.2]])


def test_grid_residual_matches_pointwise(rng):
    p = OpLearnCheb(d=3)
    s = branch_trunk_init([1, 5, 4], [3, 5, 4], 3, Ansatz("ic_zero"))
    xg = np.linspace(0, 1, 4)
    xi = rng.uniform(-1, 1, size=(5, 3))
    grid = p.grid_residual(s, s.params(), xg, xi)
    pts = np.column_stack([np.repeat(xg, 5), np.tile(xi, (4, 1))])
    np.testing.assert_allclose(grid.ravel(), residual_values(p, s, pts), atol=1e-13)


# -- RK45 oracle ----------------------------------------------------------------


def test_rk45_zero_parameters():
    np.testing.assert_array_equal(rk45_oracle(np.zeros((2, 4)), np.linspace(0, 1, 9)), 0.0)


@pytest.mark.parametrize("c", [-1.0, 0.3, 1.0])
def test_rk45_constant_rhs_is_linear(c):
    d, D = 5, 6.0
    xi = np.zeros(d)
    xi[0] = c
    grid = np.linspace(0, 1, 51)
    slope = c * math.exp(-D * np.sum((xi - 0.5) ** 2))
    u = rk45_oracle(xi, grid, D)[0]
    assert np.max(np.abs(u - slope * grid)) < 1e-6


def test_rk45_tolerance_halving(rng):
    xi = rng.uniform(-1, 1, size=(20, 8))
    grid = np.linspace(0, 1, 51)
    a = rk45_oracle(xi, grid, 6.0, 1e-8, 1e-8)
    b = rk45_oracle(xi, grid, 6.0, 5e-9, 5e-9)
    assert np.max(np.abs(a - b)) < 1e-7


def test_rk45_agrees_with_scipy(rng):
    xi = rng.uniform(-1, 1, size=(3, 4))
    grid = np.linspace(0, 1, 11)
    ours = rk45_oracle(xi, grid, 6.0)
    for i in range(3):
        sol = solve_ivp(lambda x, u: [chebyshev_rhs(x, xi[i], 6.0)], (0, 1), [0.0],
                        t_eval=grid, rtol=1e-11, atol=1e-12)
        np.testing.assert_allclose(ours[i], sol.y[0], atol=1e-7)


@given(alpha=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_rk45_linear_without_decay(alpha, seed):
    xi = np.random.default_rng(seed).uniform(-1, 1, size=(1, 4))
    grid = np.linspace(0, 1, 6)
    a = rk45_oracle(alpha * xi, grid, 0.0)
    b = alpha * rk45_oracle(xi, grid, 0.0)
    np.testing.assert_allclose(a, b, atol=1e-9 * (1 + abs(alpha)))


def test_rk45_rejects_grid_outside_unit_interval():
    with pytest.raises(ValueError):
        rk45_oracle(np.zeros((1, 2)), [0.0, 1.5])


def test_dopri5_step_underflow():
    with pytest.raises(StepSizeUnderflow):
        dopri5(lambda x, u: 1.0 / (0.5 - x) ** 3 + 0 * u, np.zeros(1), [0.0, 0.6],
               rtol=1e-12, atol=1e-12, h_min=1e-6)


def test_dopri5_exponential():
    out = dopri5(lambda x, u: u, np.ones(1), np.linspace(0, 1, 5))
    np.testing.assert_allclose(out[0], np.exp(np.linspace(0, 1, 5)), rtol=1e-7)


# -- marginal residual ----------------------------------------------------------


def test_marginal_constant_residual(rng):
    p = OpLearnCheb(d=2, D=6.0)
    s = zeroed(branch_trunk_init([1, 3, 2], [2, 3, 2], 0, Ansatz("ic_zero")))
    # with a zero surrogate and xi = (c, 0) the residual is the constant -slope
    xi = np.array([[0.7, 0.0]])
    c = chebyshev_rhs(0.0, xi[0], 6.0)
    np.testing.assert_allclose(marginal_residual(p, s, xi, np.linspace(0, 1, 13)), c**2, rtol=1e-12)


def test_marginal_zero_for_exact_surrogate():
    p = ParamODE()
    one = zeroed(mlp_init([2, 3, 1], 0, Ansatz("ic_shift", 1.0)))
    assert marginal_residual(p, one, [[0.0]], np.linspace(0, 1, 10))[0] == 0.0


def test_marginal_grid_refinement(rng):
    p = OpLearnCheb(d=3)
    s = branch_trunk_init([1, 8, 4], [3, 8, 4], 5, Ansatz("ic_zero"))
    xi = rng.uniform(-1, 1, size=(10, 3))
    coarse = marginal_residual(p, s, xi, np.linspace(0, 1, 100))
    fine = marginal_residual(p, s, xi, np.linspace(0, 1, 1000))
    np.testing.assert_allclose(coarse, fine, rtol=0.05)


def test_marginal_mlp_path_matches_grid_path(rng):
    p = OpLearnCheb(d=2)
    bt = branch_trunk_init([1, 4, 3], [2, 4, 3], 1, Ansatz("ic_zero"))
    xi = rng.uniform(-1, 1, size=(4, 2))
    xg = np.linspace(0, 1, 6)
    pts = np.column_stack([np.repeat(xg, 4), np.tile(xi, (6, 1))])
    direct = np.mean(residual_values(p, bt, pts).reshape(6, 4) ** 2, axis=0)
    np.testing.assert_allclose(marginal_residual(p, bt, xi, xg), direct, atol=1e-13)


def test_marginal_empty_grid():
    p = ParamODE()
    with pytest.raises(ValueError):
        marginal_residual(p, mlp_init([2, 1], 0, Ansatz("ic_shift", 1.0)), [[0.0]], [])


# -- misc -----------------------------------------------------------------------


def test_make_problem():
    assert make_problem("oplearn_cheb", d=5).domain.dim == 6
    assert make_problem("param_ode").domain.dim == 2
    with pytest.raises(ValueError):
        make_problem("heat")


def test_ball_samples_inside_ball(rng):
    pts = sample_ball(np.full(5, 0.5), 0.5, 2000, rng)
    assert pts.shape == (2000, 5)
    assert np.all(np.sum((pts - 0.5) ** 2, axis=1) <= 0.25)
    np.testing.assert_allclose(pts.mean(axis=0), 0.5, atol=0.02)
