"""Benchmark problems: residuals, reference solutions and validation sets.

* ``param_ode``: ``du/dx = xi * u`` on ``x in [0, 1]``, ``u(0) = u0``,
  ``xi in [C1, C2]``; exact solution ``u0 * exp(xi * x)``.
* ``oplearn_cheb``: ``du/dx = exp(-D |xi - 0.5|^2) * sum_i xi_i T_i(2x - 1)``
  with ``u(0) = 0`` and ``xi in [-M, M]^d``; reference values from a
  Dormand-Prince integrator.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Dual
from .flow import BoxDomain
from .nets import Surrogate

# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)


class StepSizeUnderflow(RuntimeError):
    pass


def exact_param_ode(x, xi, u0: float = 1.0):
    return u0 * np.exp(np.asarray(xi) * np.asarray(x))


def chebyshev_t(t, degree: int) -> np.ndarray:
    """``T_0(t) .. T_{degree-1}(t)`` stacked on a new last axis."""
    t = np.asarray(t, dtype=np.float64)
    out = np.empty(t.shape + (degree,))
    if degree > 0:
        out[..., 0] = 1.0
    if degree > 1:
        out[..., 1] = t
    for i in range(2, degree):
        out[..., i] = 2.0 * t * out[..., i - 1] - out[..., i - 2]
    return out


def chebyshev_rhs(x, xi, D: float):
    """Right-hand side of the operator-learning ODE.

    ``x`` and ``xi`` broadcast against each other with ``xi`` carrying the
    parameter vector on its last axis: ``x`` of shape ``(n,)`` with ``xi`` of
    shape ``(n, d)`` is pointwise.
    """
    xi = np.asarray(xi, dtype=np.float64)
    d = xi.shape[-1]
    poly = np.sum(xi * chebyshev_t(2.0 * np.asarray(x, dtype=np.float64) - 1.0, d), axis=-1)
    return np.exp(-D * np.sum((xi - 0.5) ** 2, axis=-1)) * poly


def chebyshev_rhs_grid(x_grid, xi, D: float) -> np.ndarray:
    """Right-hand side on the product set; shape ``(m_x, m_xi)``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    T = chebyshev_t(2.0 * np.asarray(x_grid, dtype=np.float64).reshape(-1) - 1.0, xi.shape[1])
    decay = np.exp(-D * np.sum((xi - 0.5) ** 2, axis=1))
    return (T @ xi.T) * decay


def dopri5(f, u0, eval_grid, rtol: float = 1e-8, atol: float = 1e-8, h0: float = 1e-3,
           h_min: float = 1e-14) -> np.ndarray:
    """Adaptive Dormand-Prince 5(4) for a batch of ODEs ``u' = f(x, u)`` from ``x = 0``.

    The batch shares one step sequence, with the error measured in the max
    norm over all components. Steps are shortened to land exactly on grid
    points. Returns shape ``(len(u0), len(eval_grid))``.
    """
    grid = np.asarray(eval_grid, dtype=np.float64).reshape(-1)
    if grid.size and (np.any(np.diff(grid) < 0) or grid[0] < 0):
        raise ValueError("eval_grid must be sorted and nonnegative")
    u = np.array(u0, dtype=np.float64)
    out = np.zeros((u.size, grid.size))
    gi = int(np.searchsorted(grid, 0.0, side="right"))
    out[:, :gi] = u[:, None]
    x, h = 0.0, h0
    while gi < grid.size:
        gap = grid[gi] - x
        clipped = h >= gap
        step = gap if clipped else h
        k = [f(x, u)]
        for s in range(1, 7):
            k.append(f(x + _DP_C[s] * step, u + step * sum(a * kk for a, kk in zip(_DP_A[s], k))))
        u5 = u + step * sum(b * kk for b, kk in zip(_DP_B5, k))
        u4 = u + step * sum(b * kk for b, kk in zip(_DP_B4, k))
        scale = atol + rtol * np.maximum(np.abs(u), np.abs(u5))
        err = float(np.max(np.abs(u5 - u4) / scale, initial=0.0))
        factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err**-0.2))
        if err <= 1.0:
            x = grid[gi] if clipped else x + step
            u = u5
            while gi < grid.size and grid[gi] <= x:
                out[:, gi] = u
                gi += 1
            if not clipped:
                h = step * factor
        else:
            h = step * factor
            if h < h_min:
                raise StepSizeUnderflow(f"step size {h:.3g} below {h_min:.3g} at x = {x:.6g}")
    return out


def rk45_oracle(xi, eval_grid, D: float = 6.0, rtol: float = 1e-8, atol: float = 1e-8) -> np.ndarray:
    """Reference ``u(x; xi)`` on ``eval_grid`` for every row of ``xi``; ``u(0) = 0``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    grid = np.asarray(eval_grid, dtype=np.float64).reshape(-1)
    if grid.size and (grid[0] < 0 or grid[-1] > 1):
        raise ValueError("eval_grid must lie in [0, 1]")

    def rhs(x, u):
        return chebyshev_rhs(np.full(len(xi), x), xi, D)

    return dopri5(rhs, np.zeros(len(xi)), grid, rtol, atol)


# -- problems --------------------------------------------------------------------


@dataclass(frozen=True)
class ParamODE:
    u0: float = 1.0
    xi_low: float = -3.0
    xi_high: float = 3.0
    name: str = "param_ode"

    @property
    def d(self) -> int:
        return 1

    @property
    def domain(self) -> BoxDomain:
        return BoxDomain([0.0, self.xi_low], [1.0, self.xi_high])

    @property
    def param_domain(self) -> BoxDomain:
        return BoxDomain([self.xi_low], [self.xi_high])

    @property
    def ansatz(self):
        return ("ic_shift", self.u0)

    def residual(self, net: Surrogate, params, points):
        u = net.forward(params, points, coord=0)
        return _tangent(u) - points[:, 1:2] * u.primal

    def exact(self, points) -> np.ndarray:
        points = np.atleast_2d(points)
        return exact_param_ode(points[:, 0], points[:, 1], self.u0)


@dataclass(frozen=True)
class OpLearnCheb:
    d: int = 8
    M: float = 1.0
    D: float = 6.0
    name: str = "oplearn_cheb"

    @property
    def domain(self) -> BoxDomain:
        return BoxDomain([0.0] + [-self.M] * self.d, [1.0] + [self.M] * self.d)

    @property
    def param_domain(self) -> BoxDomain:
        return BoxDomain([-self.M] * self.d, [self.M] * self.d)

    @property
    def ansatz(self):
        return ("ic_zero", 0.0)

    def residual(self, net: Surrogate, params, points):
        u = net.forward(params, points, coord=0)
        return _tangent(u) - chebyshev_rhs(points[:, 0], points[:, 1:], self.D)[:, None]

    def grid_residual(self, net: Surrogate, params, x_grid, xi):
        """Residual on ``x_grid x xi`` with shape ``(m_x, m_xi)``."""
        u = net.forward_grid(params, x_grid, xi, coord=0)
        return _tangent(u) - chebyshev_rhs_grid(x_grid, xi, self.D)

    def reference(self, xi, x_grid) -> np.ndarray:
        return rk45_oracle(xi, x_grid, self.D)


def _tangent(u: Dual):
    if u.tangent is None:
        return np.zeros(np.shape(ad.value_of(u.primal)))
    return u.tangent


PROBLEMS = {"param_ode": ParamODE, "oplearn_cheb": OpLearnCheb}


def make_problem(name: str, **constants):
    try:
        cls = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; expected one of {sorted(PROBLEMS)}") from None
    return cls(**constants)


def residual_values(problem, net: Surrogate, points) -> np.ndarray:
    """Pointwise residual as a plain array of shape ``(n,)``."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    r = problem.residual(net, net.params(), pts)
    return np.asarray(ad.value_of(r), dtype=np.float64).reshape(-1)


def residual_param_ode(s: Surrogate, x, xi, u0: float = 1.0) -> np.ndarray:
    if s.ansatz.kind != "ic_shift":
        raise ValueError("param_ode residual expects the ic_shift ansatz")
    pts = np.column_stack([np.atleast_1d(x), np.atleast_1d(xi)]).astype(np.float64)
    return residual_values(ParamODE(u0=u0), s, pts)


def residual_oplearn(s: Surrogate, x, xi, D: float = 6.0) -> np.ndarray:
    if s.ansatz.kind != "ic_zero":
        raise ValueError("oplearn residual expects the ic_zero ansatz")
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    x = np.broadcast_to(np.atleast_1d(np.asarray(x, dtype=np.float64)), (len(xi),))
    pts = np.column_stack([x, xi])
    return residual_values(OpLearnCheb(d=xi.shape[1], D=D), s, pts)


def marginal_residual(problem, s: Surrogate, xi, x_grid) -> np.ndarray:
    """Mean of squared residuals over the fixed ``x_grid``, one value per row of ``xi``."""
    x_grid = np.asarray(x_grid, dtype=np.float64).reshape(-1)
    if x_grid.size == 0:
        raise ValueError("x grid must not be empty")
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    if s.kind == "branch_trunk" and hasattr(problem, "grid_residual"):
        r = np.asarray(ad.value_of(problem.grid_residual(s, s.params(), x_grid, xi)))
        return np.mean(r * r, axis=0)
    pts = np.column_stack([np.repeat(x_grid, len(xi)), np.tile(xi, (x_grid.size, 1))])
    r = residual_values(problem, s, pts).reshape(x_grid.size, len(xi))
    return np.mean(r * r, axis=0)


def sample_ball(center, radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in a ball by rejection from its bounding box."""
    center = np.asarray(center, dtype=np.float64)
    out, have = [], 0
    while have < n:
        cand = center + radius * rng.uniform(-1.0, 1.0, size=(max(2 * (n - have), 64), center.size))
        cand = cand[np.sum((cand - center) ** 2, axis=1) <= radius**2]
        out.append(cand)
        have += len(cand)
    return np.concatenate(out)[:n]
