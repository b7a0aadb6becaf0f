"""Complete-market closed forms used as an independent oracle suite.

The market maker prices by an entropic certainty equivalent under a
deterministic change of measure; the investor's optimal terminal wealth is
then a deterministic transform of the change-of-measure density, and for
CARA investors everything is explicit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq
from scipy.special import roots_hermitenorm

from .driver import drifted_quadratic_driver
from .errors import ContractViolation, DomainError, InvalidArgument, RootNotFound
from .lattice import Lattice, NodeProcess
from .optimizer import (
    FbsdeSolution,
    UtilitySpec,
    _forward_wealth,
    verify_optimality,
)

TimeFn = Callable[[float], float]


def _as_time_fn(value) -> TimeFn:
    if callable(value):
        return value
    v = float(value)
    return lambda t: v


@dataclass
class MarketSpec:
    """Market-maker risk aversion, measure drift and investor description."""

    gamma: float
    eta: float | TimeFn
    utility: UtilitySpec
    x0: float

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise InvalidArgument("gamma must be positive")

    def eta_fn(self) -> TimeFn:
        return _as_time_fn(self.eta)

    def eta_squared_integral(self, lattice: Lattice, from_level: int = 0) -> float:
        """int_{t_k}^T eta(s)^2 ds for piecewise-constant eta on the grid."""
        grid = lattice.grid
        fn = self.eta_fn()
        return sum(
            fn(grid.t(i)) ** 2 * grid.dt for i in range(from_level, lattice.n_steps)
        )

    def driver(self):
        return drifted_quadratic_driver(self.gamma, self.eta)


def girsanov_density(lattice: Lattice, eta) -> NodeProcess:
    """Density process exp(-1/2 int eta^2 ds - int eta dW) on the lattice.

    Node-measurable for constant eta; for level-varying eta the interior
    nodes take the mean of the two parent accumulations.
    """
    fn = _as_time_fn(eta)
    grid = lattice.grid
    dt, sq = grid.dt, grid.sqrt_dt
    log_levels = [np.zeros(lattice.level_size(0))]
    for k in range(lattice.n_steps):
        e = fn(grid.t(k))
        prev = log_levels[k]
        up = prev - 0.5 * e * e * dt - e * sq
        down = prev - 0.5 * e * e * dt + e * sq
        if lattice.topology == "full-binary":
            nxt = np.empty(2 * prev.size)
            nxt[0::2] = down
            nxt[1::2] = up
        else:
            nxt = np.empty(prev.size + 1)
            nxt[0] = down[0]
            nxt[-1] = up[-1]
            if prev.size > 1:
                nxt[1:-1] = 0.5 * (up[:-1] + down[1:])
        log_levels.append(nxt)
    return NodeProcess(lattice, [np.exp(lv) for lv in log_levels])


def inverse_marginal_f(utility: UtilitySpec, gamma: float) -> Callable[[np.ndarray], np.ndarray]:
    """Inverse of the decreasing map x -> U'(x) exp(-gamma x) / gamma.

    CARA utilities have the explicit form
    f(v) = -log(gamma v / gamma_a) / (gamma + gamma_a); anything else is
    inverted by bracketed bisection.
    """
    if not gamma > 0:
        raise InvalidArgument("gamma must be positive")
    if utility.kind == "cara":
        ga = utility.gamma_a

        def f_cara(v):
            arr = np.asarray(v, dtype=float)
            if np.any(arr <= 0):
                raise DomainError("inverse marginal defined for positive arguments only")
            out = -np.log(gamma * arr / ga) / (gamma + ga)
            return out if np.ndim(v) else float(out)

        return f_cara

    def forward(x: float) -> float:
        return float(utility.u1(np.asarray(x))) * np.exp(-gamma * x) / gamma

    def f_generic(v):
        arr = np.atleast_1d(np.asarray(v, dtype=float))
        if np.any(arr <= 0):
            raise DomainError("inverse marginal defined for positive arguments only")
        out = np.empty_like(arr)
        for i, vi in enumerate(arr):
            lo, hi = -1.0, 1.0
            for _ in range(200):
                if forward(lo) >= vi >= forward(hi):
                    out[i] = brentq(lambda x: forward(x) - vi, lo, hi, xtol=1e-13)
                    break
                lo *= 2.0
                hi *= 2.0
            else:
                raise RootNotFound(f"could not bracket {vi}", bracket=(lo, hi))
        return out if np.ndim(v) else float(out[0])

    return f_generic


def budget_lambda(lattice: Lattice, market: MarketSpec) -> float:
    """Multiplier matching the replication budget E[exp(gamma X*) xi_T] = exp(gamma x0).

    CARA investors admit the explicit inversion of the budget identity;
    the generic path integrates over the Gaussian law of the density
    exponent by Gauss-Hermite quadrature and bisects on log lambda.
    """
    gamma = market.gamma
    x0 = market.x0
    v = market.eta_squared_integral(lattice)
    if market.utility.kind == "cara":
        ga = market.utility.gamma_a
        log_glg = -(gamma + ga) * x0 - ga * v / (2.0 * (gamma + ga))
        return float(ga / gamma * np.exp(log_glg))

    f = inverse_marginal_f(market.utility, gamma)
    nodes, weights = roots_hermitenorm(160)
    weights = weights / np.sqrt(2.0 * np.pi)
    # density exponent: xi_T = exp(-v/2 - sqrt(v) G) with G standard normal
    xi = np.exp(-0.5 * v - np.sqrt(v) * nodes)
    target = np.exp(gamma * x0)

    def budget_gap(log_lam: float) -> float:
        lam = np.exp(log_lam)
        xt = f(lam * xi)
        return float(np.sum(weights * np.exp(gamma * xt) * xi)) - target

    lo, hi = -1.0, 1.0
    for _ in range(200):
        if budget_gap(lo) >= 0.0 >= budget_gap(hi):
            return float(np.exp(brentq(budget_gap, lo, hi, xtol=1e-13)))
        lo -= 1.0
        hi += 1.0
    raise RootNotFound("could not bracket the budget multiplier", bracket=(lo, hi))


def optimal_terminal_wealth(
    lam: float, xi_terminal: np.ndarray | NodeProcess, f: Callable
) -> np.ndarray:
    """Node-wise X*_T = f(lambda xi_T)."""
    if not lam > 0:
        raise InvalidArgument("lambda must be positive")
    xi = xi_terminal.terminal if isinstance(xi_terminal, NodeProcess) else np.asarray(xi_terminal)
    return np.asarray(f(lam * xi), dtype=float)


def exponential_triple(
    lattice: Lattice, market: MarketSpec, s_terminal=None, y_grid=None
) -> FbsdeSolution:
    """Explicit optimal triple for a CARA investor.

    The optimal integrand is eta_t / (gamma + gamma_a); the backward value
    is the deterministic remaining-variance integral and its martingale
    part vanishes.  Wealth accumulates forward with the standard drift.
    """
    if market.utility.kind != "cara":
        raise ContractViolation("the explicit triple requires CARA utility")
    ga = market.utility.gamma_a
    gamma = market.gamma
    eta = market.eta_fn()
    grid = lattice.grid
    n = lattice.n_steps

    h_levels = [
        np.full(lattice.level_size(k), eta(grid.t(k)) / (gamma + ga))
        for k in range(n)
    ]
    zeta_levels = [
        np.full(
            lattice.level_size(k),
            market.eta_squared_integral(lattice, from_level=k) / (2.0 * (gamma + ga)),
        )
        for k in range(n + 1)
    ]
    m_levels = [np.zeros(lattice.level_size(k)) for k in range(n)]

    driver = market.driver()
    x_levels, consistency = _forward_wealth(lattice, driver, h_levels, market.x0)

    h_proc = NodeProcess(lattice, h_levels)
    theta = None
    if s_terminal is not None:
        from .optimizer import recover_theta

        theta = recover_theta(lattice, driver, s_terminal, h_proc, y_grid=y_grid)
    sol = FbsdeSolution(
        x=NodeProcess(lattice, x_levels),
        zeta=NodeProcess(lattice, zeta_levels),
        m=NodeProcess(lattice, m_levels),
        h=h_proc,
        theta=theta,
        residuals=None,
        forward_consistency=consistency,
    )
    sol.residuals = verify_optimality(sol, driver, market.utility)
    return sol


def wealth_by_conditional_route(
    lattice: Lattice, market: MarketSpec, terminal_wealth: np.ndarray
) -> NodeProcess:
    """X*_t = (1/gamma) log E^Q[exp(gamma X*_T) | F_t] under the tilted branch weights.

    The tilted up/down weights are (1 -/+ eta sqrt(dt)) / 2, matching the
    drift -eta of the Brownian motion under the pricing measure.
    """
    gamma = market.gamma
    eta = market.eta_fn()
    grid = lattice.grid
    n = lattice.n_steps
    levels: list[np.ndarray] = [np.empty(0)] * (n + 1)
    levels[n] = np.exp(gamma * np.asarray(terminal_wealth, dtype=float))
    for k in range(n - 1, -1, -1):
        e = eta(grid.t(k))
        q_up = 0.5 * (1.0 - e * grid.sqrt_dt)
        q_dn = 0.5 * (1.0 + e * grid.sqrt_dt)
        if not (0.0 < q_up < 1.0):
            raise InvalidArgument("|eta| sqrt(dt) must stay below 1")
        down, up = lattice.split_children(levels[k + 1])
        levels[k] = q_up * up + q_dn * down
    return NodeProcess(lattice, [np.log(lv) / gamma for lv in levels])


def no_trade_solution(
    lattice: Lattice, driver, x0: float, t_samples=None
) -> FbsdeSolution | None:
    """Flat solution (X = x0, zeta = 0, M = 0) when not trading is optimal.

    Applicable when g and its gradient vanish at 0 (differentiable case)
    or when 0 lies in the subgradient at 0 (positively homogeneous case);
    returns None otherwise.
    """
    grid = lattice.grid
    ts = (
        np.linspace(0.0, grid.horizon, 7)
        if t_samples is None
        else np.asarray(t_samples, dtype=float)
    )
    tol = 1e-12
    if driver.is_homogeneous and not driver.is_differentiable:
        # subgradient at 0 is [-g(t,-1), g(t,1)]
        applicable = all(
            float(driver.eval(t, 1.0)) >= -tol and float(driver.eval(t, -1.0)) >= -tol
            for t in ts
        )
    else:
        applicable = all(
            abs(float(driver.eval(t, 0.0))) <= tol
            and abs(float(driver.grad(t, 0.0))) <= tol
            for t in ts
        )
    if not applicable:
        return None
    n = lattice.n_steps
    zeros = lambda k: np.zeros(lattice.level_size(k))  # noqa: E731
    return FbsdeSolution(
        x=NodeProcess(lattice, [np.full(lattice.level_size(k), x0) for k in range(n + 1)]),
        zeta=NodeProcess(lattice, [zeros(k) for k in range(n + 1)]),
        m=NodeProcess(lattice, [zeros(k) for k in range(n)]),
        h=NodeProcess(lattice, [zeros(k) for k in range(n)]),
        theta=NodeProcess(lattice, [zeros(k) for k in range(n)]),
        residuals=None,
    )
