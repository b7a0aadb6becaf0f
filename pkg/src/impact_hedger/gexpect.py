"""Backward solvers for the nonlinear evaluation and its position integrand.

The backward recursion per level is

    Z_k  = -(Pi_{k+1}[up] - Pi_{k+1}[down]) / (2 sqrt(dt))
    Pi_k =  E_k[Pi_{k+1}] - g(t_k, Z_k) dt

which is the explicit scheme: exact for linear drivers, first order in dt
for quadratic ones, and monotone whenever |g_z| sqrt(dt) < 1 (guarded at
runtime).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .driver import Driver
from .errors import (
    ContractViolation,
    ExtrapolationRefused,
    ImageViolation,
    InvalidArgument,
    InversionUnavailable,
    NumericOverflow,
    StepSizeViolation,
)
from .lattice import Lattice, NodeProcess, StateSde, simulate_state


def _terminal_array(lattice: Lattice, terminal) -> np.ndarray:
    """Accept a NodeProcess (its last level) or a raw terminal buffer."""
    if isinstance(terminal, NodeProcess):
        values = terminal.terminal
        if terminal.n_levels != lattice.n_steps + 1:
            raise InvalidArgument("terminal process does not reach the final level")
    else:
        values = np.asarray(terminal, dtype=float)
    if values.shape != (lattice.level_size(lattice.n_steps),):
        raise InvalidArgument(
            f"terminal buffer has shape {values.shape}, expected "
            f"({lattice.level_size(lattice.n_steps)},)"
        )
    return values.copy()


@dataclass
class BsdeSolution:
    """Evaluation Pi, integrand Z and the terminal payoff they solve for."""

    pi: NodeProcess
    z: NodeProcess
    terminal: np.ndarray
    driver: Driver


def _backward_sweep(
    lattice: Lattice,
    terminal: np.ndarray,
    g_of_level: Callable[[int, np.ndarray], np.ndarray],
    slope_of_level: Callable[[int, np.ndarray], np.ndarray] | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Shared backward recursion; ``g_of_level(k, z)`` may depend on the level."""
    n = lattice.n_steps
    dt = lattice.grid.dt
    sq = lattice.grid.sqrt_dt
    pi_levels: list[np.ndarray] = [np.empty(0)] * (n + 1)
    z_levels: list[np.ndarray] = [np.empty(0)] * n
    pi_levels[n] = terminal
    for k in range(n - 1, -1, -1):
        down, up = lattice.split_children(pi_levels[k + 1])
        z = -(up - down) / (2.0 * sq)
        cond = 0.5 * (down + up)
        g = np.asarray(g_of_level(k, z), dtype=float)
        pi = cond - g * dt
        if not np.all(np.isfinite(pi)):
            raise NumericOverflow(
                f"non-finite evaluation during backward sweep at level {k}", level=k
            )
        if slope_of_level is not None:
            worst = float(np.max(slope_of_level(k, z))) * sq if z.size else 0.0
            if worst >= 1.0:
                raise StepSizeViolation(
                    f"|g_z| * sqrt(dt) = {worst:.3g} >= 1 at level {k}; "
                    "refine the time grid to keep the scheme monotone"
                )
        z_levels[k] = z
        pi_levels[k] = pi
    return pi_levels, z_levels


def solve_bsde(lattice: Lattice, driver: Driver, terminal) -> BsdeSolution:
    """Solve the backward equation with the given driver and terminal payoff."""
    term = _terminal_array(lattice, terminal)
    grid = lattice.grid
    pi_levels, z_levels = _backward_sweep(
        lattice,
        term,
        lambda k, z: driver.g(grid.t(k), z),
        lambda k, z: driver.lipschitz_slope(grid.t(k), z),
    )
    return BsdeSolution(
        pi=NodeProcess(lattice, pi_levels),
        z=NodeProcess(lattice, z_levels),
        terminal=term,
        driver=driver,
    )


def entropic_exact(lattice: Lattice, gamma: float, terminal) -> NodeProcess:
    """Exact lattice entropic evaluation, level by level in log-sum-exp form.

    Pi_k = -(1/gamma) log E_k[exp(-gamma Pi_{k+1})]
    """
    if not gamma > 0:
        raise InvalidArgument("gamma must be positive")
    term = _terminal_array(lattice, terminal)
    n = lattice.n_steps
    levels: list[np.ndarray] = [np.empty(0)] * (n + 1)
    levels[n] = term
    log2 = np.log(2.0)
    for k in range(n - 1, -1, -1):
        down, up = lattice.split_children(levels[k + 1])
        pi = -(np.logaddexp(-gamma * down, -gamma * up) - log2) / gamma
        if not np.all(np.isfinite(pi)):
            raise NumericOverflow(
                f"non-finite entropic evaluation at level {k}", level=k
            )
        levels[k] = pi
    return NodeProcess(lattice, levels)


def z_of_position(
    lattice: Lattice,
    driver: Driver,
    s_terminal,
    y: float,
    h_m=None,
) -> BsdeSolution:
    """Backward solution for the book H_M - y S held against a position y."""
    s = _terminal_array(lattice, s_terminal)
    h = np.zeros_like(s) if h_m is None else _terminal_array(lattice, h_m)
    return solve_bsde(lattice, driver, h - y * s)


def z_homogeneous(
    driver: Driver, y: float, z_minus: NodeProcess, z_plus: NodeProcess
) -> NodeProcess:
    """Position integrand by the positive-homogeneity scaling identity.

    Requires a homogeneous driver and zero book: the integrand for position
    y is |y| times the integrand of the unit short (y > 0) or unit long
    (y < 0) payoff.
    """
    if not driver.is_homogeneous:
        raise ContractViolation("scaling shortcut requires a homogeneous driver")
    if y > 0:
        return z_minus * abs(y)
    if y < 0:
        return z_plus * abs(y)
    lattice = z_minus.lattice
    return NodeProcess.constant(lattice, 0.0, n_levels=z_minus.n_levels)


@dataclass
class DzDyResult:
    """Position derivative of the integrand, with a kink diagnostic.

    ``kink`` is set when the one-sided differences disagree or when the
    derivative is requested exactly at y = 0 for a homogeneous driver,
    where the sign convention is ambiguous.  In that case ``dz`` holds the
    forward difference.
    """

    dz: NodeProcess
    kink: bool
    forward: NodeProcess
    backward: NodeProcess


def dz_dy(
    lattice: Lattice,
    driver: Driver,
    s_terminal,
    y: float,
    eps: float,
    h_m=None,
    kink_tol: float = 1e-6,
) -> DzDyResult:
    """Central finite difference of y -> Z^y, node by node."""
    if not eps > 0:
        raise InvalidArgument("eps must be positive")
    z_lo = z_of_position(lattice, driver, s_terminal, y - eps, h_m).z
    z_mid = z_of_position(lattice, driver, s_terminal, y, h_m).z
    z_hi = z_of_position(lattice, driver, s_terminal, y + eps, h_m).z

    fwd_levels = [(hi - mid) / eps for hi, mid in zip(z_hi.levels, z_mid.levels)]
    bwd_levels = [(mid - lo) / eps for mid, lo in zip(z_mid.levels, z_lo.levels)]
    forward = NodeProcess(lattice, fwd_levels)
    backward = NodeProcess(lattice, bwd_levels)

    disagreement = forward.sup_diff(backward)
    scale = 1.0 + forward.sup_abs()
    kink = disagreement > kink_tol * scale
    if driver.is_homogeneous and not driver.is_differentiable and y == 0.0:
        # sign convention at zero position is ambiguous for kinked drivers
        kink = True
    if kink:
        return DzDyResult(dz=forward, kink=True, forward=forward, backward=backward)
    central = NodeProcess(
        lattice, [0.5 * (f + b) for f, b in zip(fwd_levels, bwd_levels)]
    )
    return DzDyResult(dz=central, kink=False, forward=forward, backward=backward)


def _fd_gradient(fn: Callable[[np.ndarray], np.ndarray], r: np.ndarray) -> np.ndarray:
    h = 1e-6 * (1.0 + np.abs(r))
    return (np.asarray(fn(r + h), dtype=float) - np.asarray(fn(r - h), dtype=float)) / (2.0 * h)


def dz_dy_variational(
    lattice: Lattice,
    driver: Driver,
    markov: StateSde,
    s_fn: Callable[[np.ndarray], np.ndarray],
    h_fn: Callable[[np.ndarray], np.ndarray] | None,
    y: float,
    eps: float = 1e-4,
    s_grad: Callable[[np.ndarray], np.ndarray] | None = None,
    h_grad: Callable[[np.ndarray], np.ndarray] | None = None,
) -> NodeProcess:
    """Position derivative via the first-variation backward equation.

    For a Markov book (payoffs s(R_T), h(R_T)) the r-sensitivity F of the
    evaluation solves a linear backward equation whose terminal condition
    is (h_r - y s_r)(R_T) * dR_T/dr0 and whose drift term is
    g_z(t, Z^y_t) * V_t, V being F's own martingale integrand.  The
    integrand then satisfies Z^y = -F * (dR/dr0)^{-1} * sigma, and the
    position derivative is obtained by differencing F in y through its
    terminal condition.  This route is independent of :func:`dz_dy`, which
    differences the primal integrand directly.
    """
    if not isinstance(markov, StateSde):
        raise ContractViolation("variational derivative requires Markov state dynamics")
    if not driver.is_differentiable:
        raise ContractViolation("variational derivative requires a differentiable driver")
    if callable(markov.sigma):
        raise ContractViolation("variational derivative requires constant volatility")

    grid = lattice.grid
    n = lattice.n_steps
    r_proc = simulate_state(lattice, markov)
    r_T = r_proc.terminal

    # dR/dr0 along the Euler recursion: grad_{k+1} = grad_k * (1 + b_r dt)
    grad_levels = [np.ones(lattice.level_size(0))]
    for k in range(n):
        r = r_proc.values(k)
        br = markov.drift_gradient(grid.t(k), r)
        nxt = grad_levels[k] * (1.0 + br * grid.dt)
        if lattice.topology == "full-binary":
            doubled = np.empty(2 * nxt.size)
            doubled[0::2] = nxt
            doubled[1::2] = nxt
            grad_levels.append(doubled)
        else:
            ext = np.empty(nxt.size + 1)
            ext[0] = nxt[0]
            ext[-1] = nxt[-1]
            if nxt.size > 1:
                ext[1:-1] = 0.5 * (nxt[:-1] + nxt[1:])
            grad_levels.append(ext)

    s_r = s_grad(r_T) if s_grad is not None else _fd_gradient(s_fn, r_T)
    if h_fn is None:
        h_vals = np.zeros_like(r_T)
        h_r = np.zeros_like(r_T)
    else:
        h_vals = np.asarray(h_fn(r_T), dtype=float)
        h_r = h_grad(r_T) if h_grad is not None else _fd_gradient(h_fn, r_T)
    s_vals = np.asarray(s_fn(r_T), dtype=float)

    sigma = float(markov.sigma)

    def solve_f(y_shift: float) -> list[np.ndarray]:
        primal = solve_bsde(lattice, driver, h_vals - y_shift * s_vals)
        z_levels = primal.z.levels

        def g_of_level(k: int, v: np.ndarray) -> np.ndarray:
            gz = np.asarray(driver.g_z(grid.t(k), z_levels[k]))
            return gz * v

        f_terminal = (h_r - y_shift * s_r) * grad_levels[n]
        f_levels, _ = _backward_sweep(lattice, f_terminal, g_of_level)
        return f_levels

    f_hi = solve_f(y + eps)
    f_lo = solve_f(y - eps)
    dz_levels = [
        -(hi - lo) / (2.0 * eps) / grad_levels[k] * sigma
        for k, (hi, lo) in enumerate(zip(f_hi[:-1], f_lo[:-1]))
    ]
    return NodeProcess(lattice, dz_levels)


class PositionCurve:
    """Cache of y -> Z^y on a user-set y-grid with linear interpolation.

    Homogeneous drivers with zero book use the exact scaling identity for
    every y instead; non-homogeneous drivers interpolate between the
    precomputed grid solutions and refuse any lookup outside the hull.
    """

    def __init__(
        self,
        lattice: Lattice,
        driver: Driver,
        s_terminal,
        y_grid: Sequence[float] | np.ndarray | None = None,
        h_m=None,
    ):
        self.lattice = lattice
        self.driver = driver
        self._s = _terminal_array(lattice, s_terminal)
        self._homogeneous = driver.is_homogeneous and h_m is None
        if self._homogeneous:
            self.z_minus = solve_bsde(lattice, driver, -self._s).z
            self.z_plus = solve_bsde(lattice, driver, self._s).z
            self.y_grid = None
        else:
            if y_grid is None:
                raise InvalidArgument(
                    "a y-grid is required for non-homogeneous drivers"
                )
            yg = np.asarray(y_grid, dtype=float)
            if yg.ndim != 1 or yg.size < 2 or np.any(np.diff(yg) <= 0):
                raise InvalidArgument("y_grid must be sorted with at least 2 points")
            self.y_grid = yg
            self._z_by_y = [
                z_of_position(lattice, driver, self._s, y, h_m).z.levels for y in yg
            ]
            # stacked per level: shape (n_y, level_size)
            self._stacks = [
                np.stack([zs[k] for zs in self._z_by_y])
                for k in range(lattice.n_steps)
            ]

    @property
    def hull(self) -> tuple[float, float]:
        if self._homogeneous:
            return (-np.inf, np.inf)
        return float(self.y_grid[0]), float(self.y_grid[-1])

    def z_level(self, k: int, y_values: np.ndarray) -> np.ndarray:
        """Integrand at level k for node-wise positions ``y_values``."""
        y = np.asarray(y_values, dtype=float)
        if self._homogeneous:
            zm = self.z_minus.values(k)
            zp = self.z_plus.values(k)
            return np.where(y > 0, y * zm, -y * zp)
        lo, hi = self.hull
        if np.any(y < lo) or np.any(y > hi):
            raise ExtrapolationRefused(
                f"position {float(np.min(y)):.4g}..{float(np.max(y)):.4g} outside "
                f"the y-grid hull [{lo:.4g}, {hi:.4g}]"
            )
        stack = self._stacks[k]
        idx = np.clip(np.searchsorted(self.y_grid, y, side="right") - 1, 0, self.y_grid.size - 2)
        y0 = self.y_grid[idx]
        y1 = self.y_grid[idx + 1]
        w = (y - y0) / (y1 - y0)
        cols = np.arange(stack.shape[1])
        if y.shape == ():
            z0 = stack[idx]
            z1 = stack[idx + 1]
        else:
            z0 = stack[idx, cols]
            z1 = stack[idx + 1, cols]
        return (1.0 - w) * z0 + w * z1

    def z_process(self, y: float) -> NodeProcess:
        """Integrand process for a constant position y."""
        levels = [
            self.z_level(k, np.full(self.lattice.level_size(k), float(y)))
            for k in range(self.lattice.n_steps)
        ]
        return NodeProcess(self.lattice, levels)

    def invert_level(self, k: int, targets: np.ndarray) -> np.ndarray:
        """Positions y solving Z^y = target per node (monotone curves only)."""
        if self._homogeneous:
            zm = self.z_minus.values(k)
            zp = self.z_plus.values(k)
            t = np.asarray(targets, dtype=float)
            out = np.zeros_like(t)
            with np.errstate(divide="ignore", invalid="ignore"):
                cand_pos = np.where(zm != 0.0, t / zm, np.nan)
                cand_neg = np.where(zp != 0.0, -t / zp, np.nan)
            nonzero = t != 0.0
            take_pos = nonzero & (cand_pos > 0)
            take_neg = nonzero & ~take_pos & (cand_neg < 0)
            bad = nonzero & ~take_pos & ~take_neg
            if np.any(bad):
                raise ImageViolation(
                    "integrand target outside the homogeneous image cone"
                )
            out[take_pos] = cand_pos[take_pos]
            out[take_neg] = cand_neg[take_neg]
            return out
        stack = self._stacks[k]  # (n_y, n_nodes)
        diffs = np.diff(stack, axis=0)
        if np.all(diffs > 0):
            direction = 1.0
        elif np.all(diffs < 0):
            direction = -1.0
        else:
            raise InversionUnavailable(
                f"position curve is not monotone in y at level {k}"
            )
        t = np.asarray(targets, dtype=float)
        lo = np.min(stack, axis=0)
        hi = np.max(stack, axis=0)
        if np.any(t < lo - 1e-12) or np.any(t > hi + 1e-12):
            raise ImageViolation("integrand target outside the attainable image")
        out = np.empty_like(t)
        s = stack if direction > 0 else -stack
        tt = t if direction > 0 else -t
        for j in range(stack.shape[1]):
            out[j] = np.interp(tt[j], s[:, j], self.y_grid)
        return out
