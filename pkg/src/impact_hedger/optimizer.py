"""Optimal strategy via the first-order condition and the coupled system.

The backward pair (zeta, M) carries the curvature of the investor's
marginal utility; the node-wise root H of

    -U'(x + zeta) g_z(t, H) + U''(x + zeta) (H + M) = 0

is the optimal position integrand, and the forward wealth closes the loop.
With CARA utility the backward pair decouples from wealth and the system
solves in one backward sweep; otherwise a damped Picard iteration
alternates backward and forward passes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .driver import Driver
from .errors import (
    ContractViolation,
    InvalidArgument,
    NumericOverflow,
    RootNotFound,
)
from .gexpect import PositionCurve, _terminal_array, solve_bsde
from .lattice import FULL_BINARY, Lattice, NodeProcess


@dataclass(frozen=True)
class UtilitySpec:
    """Utility with derivatives up to third order and inverse marginal."""

    kind: str
    u: Callable[[np.ndarray], np.ndarray]
    u1: Callable[[np.ndarray], np.ndarray]
    u2: Callable[[np.ndarray], np.ndarray]
    u3: Callable[[np.ndarray], np.ndarray]
    inverse_marginal: Callable[[np.ndarray], np.ndarray]
    gamma_a: float | None = None

    def psi1(self, x: np.ndarray) -> np.ndarray:
        """U' / U'' (nonpositive for concave increasing utilities)."""
        return np.asarray(self.u1(x)) / np.asarray(self.u2(x))

    def psi2(self, x: np.ndarray) -> np.ndarray:
        """U''' / U''."""
        return np.asarray(self.u3(x)) / np.asarray(self.u2(x))

    def validate(self, x_samples=None) -> None:
        xs = np.linspace(-2.0, 2.0, 41) if x_samples is None else np.asarray(x_samples)
        u1 = np.asarray(self.u1(xs))
        u2 = np.asarray(self.u2(xs))
        if np.any(u1 <= 0):
            raise InvalidArgument("U' must be strictly positive")
        if np.any(u2 >= 0):
            raise InvalidArgument("U'' must be strictly negative")
        back = np.asarray(self.inverse_marginal(u1))
        if np.max(np.abs(back - xs)) > 1e-10:
            raise InvalidArgument("inverse marginal does not invert U'")


def cara_utility(gamma_a: float) -> UtilitySpec:
    """U(x) = -exp(-gamma_a x)."""
    if not gamma_a > 0:
        raise InvalidArgument("gamma_a must be positive")
    g = float(gamma_a)
    spec = UtilitySpec(
        kind="cara",
        u=lambda x: -np.exp(-g * x),
        u1=lambda x: g * np.exp(-g * x),
        u2=lambda x: -g * g * np.exp(-g * x),
        u3=lambda x: g**3 * np.exp(-g * x),
        inverse_marginal=lambda v: -np.log(np.asarray(v) / g) / g,
        gamma_a=g,
    )
    spec.validate()
    return spec


def custom_utility(
    u: Callable,
    u1: Callable,
    u2: Callable,
    u3: Callable,
    inverse_marginal: Callable | None = None,
) -> UtilitySpec:
    """Wrap user callables; the inverse marginal falls back to bisection."""
    if inverse_marginal is None:

        def inverse_marginal(v):
            v_arr = np.atleast_1d(np.asarray(v, dtype=float))
            out = np.empty_like(v_arr)
            for i, vi in enumerate(v_arr):
                out[i] = _invert_scalar_decreasing(lambda x: float(u1(x)), vi)
            return out if np.ndim(v) else float(out[0])

    spec = UtilitySpec(
        kind="custom", u=u, u1=u1, u2=u2, u3=u3,
        inverse_marginal=inverse_marginal,
    )
    spec.validate()
    return spec


def _invert_scalar_decreasing(fn: Callable[[float], float], target: float) -> float:
    """Solve fn(x) = target for a strictly decreasing fn on an expanding bracket."""
    lo, hi = -1.0, 1.0
    for _ in range(200):
        if fn(lo) >= target >= fn(hi):
            return brentq(lambda x: fn(x) - target, lo, hi, xtol=1e-14)
        lo *= 2.0
        hi *= 2.0
    raise RootNotFound(f"could not bracket target {target}", bracket=(lo, hi))


@dataclass
class OptimalityReport:
    """Residual magnitudes of the first-order and martingale conditions."""

    martingale_residual: float
    foc_residual: float | None
    homogeneous_equality_residual: float | None
    homogeneous_slack: tuple[float, float] | None
    psi2_consistency: float
    beta: NodeProcess | None = None


@dataclass
class FbsdeSolution:
    """Forward wealth, backward pair, optimal integrand and diagnostics."""

    x: NodeProcess
    zeta: NodeProcess
    m: NodeProcess
    h: NodeProcess
    theta: NodeProcess | None
    residuals: OptimalityReport | None
    converged: bool = True
    iterations: int = 0
    forward_consistency: float = 0.0
    ambiguous: bool = False


# ---------------------------------------------------------------------------
# first-order condition solvers
# ---------------------------------------------------------------------------


def solve_h(
    driver: Driver,
    utility: UtilitySpec,
    t: float,
    x: float,
    zeta: float,
    m: float,
) -> float:
    """Root H of -U'(x+zeta) g_z(t, H) + U''(x+zeta) (H + m) = 0.

    Affine gradients admit a closed form; otherwise the root is bracketed
    inside |H| <= |m| + |psi1 g_z(t, 0)| + 1, which contains it whenever
    the driver is convex.
    """
    if not driver.is_differentiable:
        raise ContractViolation("solve_h requires a differentiable driver")
    w = x + zeta
    u2 = float(utility.u2(np.asarray(w)))
    if u2 >= 0:
        raise InvalidArgument("U'' must be negative at x + zeta")
    psi1 = float(utility.psi1(np.asarray(w)))

    coeffs = driver.affine_grad_coeffs(t)
    if coeffs is not None:
        a, b = coeffs
        h = (psi1 * b - m) / (1.0 - a * psi1)
        _assert_linear_growth(h, m, psi1, b)
        return float(h)

    gz0 = float(driver.grad(t, 0.0))
    radius = abs(m) + abs(psi1 * gz0) + 1.0
    u1 = float(utility.u1(np.asarray(w)))

    def foc(hh: float) -> float:
        return -u1 * float(driver.grad(t, hh)) + u2 * (hh + m)

    lo, hi = -radius, radius
    for _ in range(60):
        flo, fhi = foc(lo), foc(hi)
        if flo == 0.0:
            return lo
        if fhi == 0.0:
            return hi
        if flo * fhi < 0:
            h = brentq(foc, lo, hi, xtol=1e-14)
            _assert_linear_growth(h, m, psi1, gz0)
            return float(h)
        lo *= 2.0
        hi *= 2.0
    raise RootNotFound(
        f"no sign change for the first-order condition in [{lo}, {hi}]",
        bracket=(lo, hi),
    )


def _assert_linear_growth(h: float, m: float, psi1: float, gz0: float) -> None:
    # convexity bound: |H| <= |m| + |psi1 * g_z(t, 0)|
    bound = abs(m) + abs(psi1 * gz0) + 1e-9 * (1.0 + abs(m))
    if abs(h) > bound:
        raise RootNotFound(
            f"first-order root {h:.6g} violates the linear-growth bound {bound:.6g}"
        )


@dataclass
class HomogeneousRoot:
    """Outcome of the kinked first-order condition."""

    theta: float
    h: float
    ambiguous: bool


def solve_h_homogeneous(
    z_minus: float,
    z_plus: float,
    g_minus: float,
    g_plus: float,
    utility: UtilitySpec,
    x: float,
    zeta: float,
    m: float,
    theta_plus: bool = False,
) -> HomogeneousRoot:
    """Optimal position for a positively homogeneous driver.

    ``z_minus``/``z_plus`` are the integrands of the unit short/long
    payoffs and ``g_minus``/``g_plus`` the driver values on them.  The long
    branch applies when it is positive, the short branch when negative,
    and otherwise the no-trade band absorbs the position.  When both
    branches fire at once the root is ambiguous unless short sales are
    excluded (``theta_plus``), in which case only the long branch is used.
    """
    if z_minus == 0.0:
        raise InvalidArgument("unit-short integrand must be nonzero")
    w = np.asarray(x + zeta)
    psi1 = float(utility.psi1(w))

    cand_long = (-z_minus * m + psi1 * g_minus) / (z_minus * z_minus)
    if theta_plus:
        if cand_long > 0:
            return HomogeneousRoot(theta=cand_long, h=cand_long * z_minus, ambiguous=False)
        return HomogeneousRoot(theta=0.0, h=0.0, ambiguous=False)

    cand_short = -(-z_plus * m + psi1 * g_plus) / (z_plus * z_plus)
    long_active = cand_long > 0
    short_active = cand_short < 0
    if long_active and short_active:
        return HomogeneousRoot(
            theta=cand_long, h=cand_long * z_minus, ambiguous=True
        )
    if long_active:
        return HomogeneousRoot(theta=cand_long, h=cand_long * z_minus, ambiguous=False)
    if short_active:
        return HomogeneousRoot(
            theta=cand_short, h=abs(cand_short) * z_plus, ambiguous=False
        )
    return HomogeneousRoot(theta=0.0, h=0.0, ambiguous=False)


# ---------------------------------------------------------------------------
# coupled system solvers
# ---------------------------------------------------------------------------


def _h_level_cara(driver: Driver, gamma_a: float, t: float, m: np.ndarray) -> np.ndarray:
    """Vectorized H(t, M) for CARA utility: 0 in grad g(H) + gamma_a (H + M)."""
    coeffs = driver.affine_grad_coeffs(t)
    if coeffs is not None:
        a, b = coeffs
        return (-b - gamma_a * m) / (gamma_a + a)
    if driver.is_homogeneous and not driver.is_differentiable:
        slope_pos = float(driver.eval(t, 1.0))   # right slope at 0
        slope_neg = float(driver.eval(t, -1.0))  # minus the left slope at 0
        h_pos = -m - slope_pos / gamma_a
        h_neg = -m + slope_neg / gamma_a
        out = np.zeros_like(m)
        out = np.where(h_pos > 0, h_pos, out)
        out = np.where(h_neg < 0, h_neg, out)
        return out
    utility = cara_utility(gamma_a)
    return np.array(
        [solve_h(driver, utility, t, 0.0, 0.0, float(mi)) for mi in np.atleast_1d(m)]
    )


def _h_level_general(
    driver: Driver, utility: UtilitySpec, t: float,
    w: np.ndarray, m: np.ndarray,
) -> np.ndarray:
    """Vectorized H at a level for wealth-plus-zeta w and projection m."""
    coeffs = driver.affine_grad_coeffs(t)
    if coeffs is not None:
        a, b = coeffs
        psi1 = np.asarray(utility.psi1(w))
        return (psi1 * b - m) / (1.0 - a * psi1)
    return np.array(
        [
            solve_h(driver, utility, t, float(wi), 0.0, float(mi))
            for wi, mi in zip(w, m)
        ]
    )


def _forward_wealth(
    lattice: Lattice,
    driver: Driver,
    h_levels: list[np.ndarray],
    x0: float,
) -> tuple[list[np.ndarray], float]:
    """Forward accumulation dX = -g(t, H) dt + H dW on the lattice.

    On the recombining topology an interior node inherits the mean of its
    two parents' predictions; the largest parent disagreement is returned
    as a consistency diagnostic (exactly zero when H is deterministic per
    level).
    """
    grid = lattice.grid
    dt, sq = grid.dt, grid.sqrt_dt
    x_levels = [np.full(1, float(x0))]
    worst = 0.0
    for k in range(lattice.n_steps):
        x = x_levels[k]
        h = h_levels[k]
        g = np.asarray(driver.g(grid.t(k), h), dtype=float)
        up = x - g * dt + h * sq
        down = x - g * dt - h * sq
        if lattice.topology == FULL_BINARY:
            nxt = np.empty(2 * x.size)
            nxt[0::2] = down
            nxt[1::2] = up
        else:
            nxt = np.empty(x.size + 1)
            nxt[0] = down[0]
            nxt[-1] = up[-1]
            if x.size > 1:
                from_up = up[:-1]
                from_down = down[1:]
                worst = max(worst, float(np.max(np.abs(from_up - from_down))))
                nxt[1:-1] = 0.5 * (from_up + from_down)
        if not np.all(np.isfinite(nxt)):
            raise NumericOverflow(f"non-finite wealth at level {k + 1}", level=k + 1)
        x_levels.append(nxt)
    return x_levels, worst


def _project_m(lattice: Lattice, zeta_next: np.ndarray) -> np.ndarray:
    """M_k = +E_k[zeta_{k+1} dW] / dt (the backward pair carries +M dW)."""
    down, up = lattice.split_children(zeta_next)
    return (up - down) / (2.0 * lattice.grid.sqrt_dt)


def solve_fbsde_cara(
    lattice: Lattice,
    driver: Driver,
    gamma_a: float,
    x0: float,
    s_terminal=None,
    y_grid=None,
) -> FbsdeSolution:
    """Decoupled solve for CARA utility.

    The backward pair solves zeta_k = E_k[zeta_{k+1}] - f(t_k, M_k) dt with
    f(t, M) = (gamma_a / 2) |H + M|^2 + g(t, H) and zero terminal value;
    wealth then accumulates forward with integrand H(t, M).  The optimal
    holdings are recovered from the position curve when the traded payoff
    is supplied.
    """
    if not gamma_a > 0:
        raise InvalidArgument("gamma_a must be positive")
    grid = lattice.grid
    n = lattice.n_steps
    dt = grid.dt

    zeta_levels: list[np.ndarray] = [np.empty(0)] * (n + 1)
    m_levels: list[np.ndarray] = [np.empty(0)] * n
    h_levels: list[np.ndarray] = [np.empty(0)] * n
    zeta_levels[n] = np.zeros(lattice.level_size(n))
    for k in range(n - 1, -1, -1):
        t = grid.t(k)
        m = _project_m(lattice, zeta_levels[k + 1])
        h = _h_level_cara(driver, gamma_a, t, m)
        f = 0.5 * gamma_a * (h + m) ** 2 + np.asarray(driver.g(t, h), dtype=float)
        zeta = lattice.conditional_expectation(zeta_levels[k + 1]) - f * dt
        if not np.all(np.isfinite(zeta)):
            raise NumericOverflow(f"non-finite backward value at level {k}", level=k)
        zeta_levels[k] = zeta
        m_levels[k] = m
        h_levels[k] = h

    x_levels, consistency = _forward_wealth(lattice, driver, h_levels, x0)

    h_proc = NodeProcess(lattice, h_levels)
    theta = None
    if s_terminal is not None:
        theta = recover_theta(lattice, driver, s_terminal, h_proc, y_grid=y_grid)
    sol = FbsdeSolution(
        x=NodeProcess(lattice, x_levels),
        zeta=NodeProcess(lattice, zeta_levels),
        m=NodeProcess(lattice, m_levels),
        h=h_proc,
        theta=theta,
        residuals=None,
        converged=True,
        iterations=0,
        forward_consistency=consistency,
    )
    sol.residuals = verify_optimality(sol, driver, cara_utility(gamma_a))
    return sol


def _homogeneous_h_level(
    utility: UtilitySpec,
    t: float,
    w: np.ndarray,
    m: np.ndarray,
    zm: np.ndarray,
    zp: np.ndarray,
    gm: np.ndarray,
    gp: np.ndarray,
    theta_plus: bool,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Vectorized kinked first-order condition; returns (h, theta, ambiguous)."""
    psi1 = np.asarray(utility.psi1(w))
    cand_long = (-zm * m + psi1 * gm) / (zm * zm)
    long_on = cand_long > 0
    theta = np.where(long_on, cand_long, 0.0)
    h = np.where(long_on, cand_long * zm, 0.0)
    ambiguous = False
    if not theta_plus:
        with np.errstate(divide="ignore", invalid="ignore"):
            cand_short = np.where(
                zp != 0.0, -(-zp * m + psi1 * gp) / (zp * zp), np.nan
            )
        short_on = ~long_on & (cand_short < 0)
        theta = np.where(short_on, cand_short, theta)
        h = np.where(short_on, np.abs(cand_short) * zp, h)
        ambiguous = bool(np.any(long_on & (cand_short < 0)))
    return h, theta, ambiguous


def solve_fbsde_picard(
    lattice: Lattice,
    driver: Driver,
    utility: UtilitySpec,
    x0: float,
    tol: float = 1e-8,
    max_iter: int = 50,
    damping: float = 0.5,
    s_terminal=None,
    y_grid=None,
    theta_plus: bool | None = None,
) -> FbsdeSolution:
    """Damped Picard iteration on the coupled forward-backward system.

    Each pass solves the backward pair against the frozen wealth iterate
    (driver (1/2) psi2(X + zeta) |H + M|^2 - g(t, H), H from the node-wise
    first-order condition) and then refreshes wealth from the new
    integrand.  The iterate is updated with relaxation ``damping``; the
    convergence test uses the undamped fixed-point residual, and the
    returned wealth is the undamped image, so a decoupled system is
    reproduced exactly.

    Kinked homogeneous drivers require the traded payoff (for the unit
    integrands) and default to the long-only mode, where the kinked
    first-order condition always has a unique root.
    """
    if not tol > 0:
        raise InvalidArgument("tol must be positive")
    if not 0.0 < damping <= 1.0:
        raise InvalidArgument("damping must lie in (0, 1]")
    grid = lattice.grid
    n = lattice.n_steps
    dt = grid.dt

    kinked = driver.is_homogeneous and not driver.is_differentiable
    if kinked:
        if s_terminal is None:
            raise ContractViolation(
                "homogeneous drivers need s_terminal for the unit integrands"
            )
        if theta_plus is None:
            theta_plus = True
        s = _terminal_array(lattice, s_terminal)
        z_minus = solve_bsde(lattice, driver, -s).z
        z_plus = solve_bsde(lattice, driver, s).z

    x_iter = [np.full(lattice.level_size(k), float(x0)) for k in range(n + 1)]
    converged = False
    iterations = 0
    zeta_levels: list[np.ndarray] = []
    m_levels: list[np.ndarray] = []
    h_levels: list[np.ndarray] = []
    theta_levels: list[np.ndarray] = []
    consistency = 0.0
    ambiguous = False

    for it in range(1, max_iter + 1):
        iterations = it
        zeta_levels = [np.empty(0)] * (n + 1)
        m_levels = [np.empty(0)] * n
        h_levels = [np.empty(0)] * n
        theta_levels = [np.empty(0)] * n
        zeta_levels[n] = np.zeros(lattice.level_size(n))
        ambiguous = False
        for k in range(n - 1, -1, -1):
            t = grid.t(k)
            zeta_bar = lattice.conditional_expectation(zeta_levels[k + 1])
            m = _project_m(lattice, zeta_levels[k + 1])
            w = x_iter[k] + zeta_bar
            if kinked:
                zm = z_minus.values(k)
                zp = z_plus.values(k)
                gm = np.asarray(driver.g(t, zm))
                gp = np.asarray(driver.g(t, zp))
                h, theta_k, amb = _homogeneous_h_level(
                    utility, t, w, m, zm, zp, gm, gp, theta_plus
                )
                ambiguous = ambiguous or amb
                theta_levels[k] = theta_k
            else:
                h = _h_level_general(driver, utility, t, w, m)
            psi2 = np.asarray(utility.psi2(w))
            f = 0.5 * psi2 * (h + m) ** 2 - np.asarray(driver.g(t, h), dtype=float)
            zeta = zeta_bar + f * dt
            if not np.all(np.isfinite(zeta)):
                raise NumericOverflow(
                    f"non-finite backward value at level {k}", level=k
                )
            zeta_levels[k] = zeta
            m_levels[k] = m
            h_levels[k] = h

        x_new, consistency = _forward_wealth(lattice, driver, h_levels, x0)
        residual = max(
            float(np.max(np.abs(a - b))) for a, b in zip(x_new, x_iter)
        )
        if residual < tol:
            converged = True
            x_iter = x_new
            break
        x_iter = [
            damping * a + (1.0 - damping) * b for a, b in zip(x_new, x_iter)
        ]

    h_proc = NodeProcess(lattice, h_levels)
    if kinked:
        theta = NodeProcess(lattice, theta_levels)
    elif s_terminal is not None:
        theta = recover_theta(lattice, driver, s_terminal, h_proc, y_grid=y_grid)
    else:
        theta = None
    sol = FbsdeSolution(
        x=NodeProcess(lattice, x_iter),
        zeta=NodeProcess(lattice, zeta_levels),
        m=NodeProcess(lattice, m_levels),
        h=h_proc,
        theta=theta,
        residuals=None,
        converged=converged,
        iterations=iterations,
        forward_consistency=consistency,
        ambiguous=ambiguous,
    )
    if kinked:
        sol.residuals = verify_optimality(
            sol, driver, utility, z_minus=z_minus, z_plus=z_plus
        )
    else:
        sol.residuals = verify_optimality(sol, driver, utility)
    return sol


def verify_optimality(
    sol: FbsdeSolution,
    driver: Driver,
    utility: UtilitySpec,
    z_minus: NodeProcess | None = None,
    z_plus: NodeProcess | None = None,
    band_tol: float = 1e-10,
) -> OptimalityReport:
    """Residuals of the optimality characterization for a candidate triple.

    Checks that U'(X + zeta) is a one-step martingale, that the node-wise
    first-order condition holds (differentiable drivers), and, for
    homogeneous drivers with the unit-payoff integrands supplied, the
    equality on traded nodes and the band inequalities on no-trade nodes.
    """
    lattice = sol.x.lattice
    grid = lattice.grid
    n = lattice.n_steps

    r_levels = [
        np.asarray(utility.u1(sol.x.values(k) + sol.zeta.values(k)))
        for k in range(n + 1)
    ]
    mart = 0.0
    for k in range(n):
        pred = lattice.conditional_expectation(r_levels[k + 1])
        mart = max(mart, float(np.max(np.abs(pred - r_levels[k]))))

    beta_levels = []
    foc = None
    psi2_gap = 0.0
    for k in range(n):
        w = sol.x.values(k) + sol.zeta.values(k)
        u2 = np.asarray(utility.u2(w))
        hm = sol.h.values(k) + sol.m.values(k)
        beta = u2 * hm
        beta_levels.append(beta)
        u3 = np.asarray(utility.u3(w))
        lhs = 0.5 * beta**2 * u3 / u2**3
        rhs = 0.5 * (u3 / u2) * hm**2
        psi2_gap = max(psi2_gap, float(np.max(np.abs(lhs - rhs))))

    if driver.is_differentiable:
        foc = 0.0
        for k in range(n):
            t = grid.t(k)
            w = sol.x.values(k) + sol.zeta.values(k)
            u1 = np.asarray(utility.u1(w))
            u2 = np.asarray(utility.u2(w))
            h = sol.h.values(k)
            gz = np.asarray(driver.grad(t, h))
            res = -u1 * gz + u2 * (h + sol.m.values(k))
            foc = max(foc, float(np.max(np.abs(res))))

    hom_eq = None
    hom_slack = None
    if (
        driver.is_homogeneous
        and not driver.is_differentiable
        and z_minus is not None
        and z_plus is not None
        and sol.theta is not None
    ):
        hom_eq = 0.0
        slack1 = np.inf
        slack2 = np.inf
        for k in range(n):
            t = grid.t(k)
            w = sol.x.values(k) + sol.zeta.values(k)
            u1 = np.asarray(utility.u1(w))
            u2 = np.asarray(utility.u2(w))
            theta = sol.theta.values(k)
            m = sol.m.values(k)
            h = sol.h.values(k)
            zm = z_minus.values(k)
            zp = z_plus.values(k)
            gm = np.asarray(driver.g(t, zm))
            gp = np.asarray(driver.g(t, zp))
            traded = np.abs(theta) > band_tol
            if np.any(traded):
                sgn = np.sign(theta[traded])
                z_side = np.where(sgn > 0, zm[traded], zp[traded])
                g_side = np.where(sgn > 0, gm[traded], gp[traded])
                res = (
                    -u1[traded] * sgn * g_side
                    + sgn * z_side * u2[traded] * (h[traded] + m[traded])
                )
                hom_eq = max(hom_eq, float(np.max(np.abs(res))))
            idle = ~traded
            if np.any(idle):
                s1 = u1[idle] * gm[idle] - u2[idle] * m[idle] * zm[idle]
                s2 = u1[idle] * gp[idle] - u2[idle] * m[idle] * zp[idle]
                slack1 = min(slack1, float(np.min(s1)))
                slack2 = min(slack2, float(np.min(s2)))
        hom_slack = (
            slack1 if math.isfinite(slack1) else 0.0,
            slack2 if math.isfinite(slack2) else 0.0,
        )

    return OptimalityReport(
        martingale_residual=mart,
        foc_residual=foc,
        homogeneous_equality_residual=hom_eq,
        homogeneous_slack=hom_slack,
        psi2_consistency=psi2_gap,
        beta=NodeProcess(lattice, beta_levels),
    )


def recover_theta(
    lattice: Lattice,
    driver: Driver,
    s_terminal,
    h: NodeProcess,
    y_grid=None,
    curve: PositionCurve | None = None,
) -> NodeProcess:
    """Holdings theta with Z^theta = h, by inverting the position curve.

    Homogeneous drivers invert the scaling cone directly; otherwise the
    piecewise-linear interpolated curve is inverted node by node, which
    requires it to be monotone in the position.
    """
    if curve is None:
        curve = PositionCurve(
            lattice,
            driver,
            s_terminal,
            y_grid=None if (driver.is_homogeneous and y_grid is None) else y_grid,
        )
    theta_levels = [
        curve.invert_level(k, h.values(k)) for k in range(h.n_levels)
    ]
    return NodeProcess(lattice, theta_levels)
