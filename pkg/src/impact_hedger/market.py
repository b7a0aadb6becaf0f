"""Quoted price curve, trading P&L and admissibility diagnostics.

Wealth of a trading strategy is path-dependent, so P&L accounting runs on
the full-binary expansion of the lattice (one node per path prefix).  The
position integrand itself is a plain node process and is looked up from a
:class:`~impact_hedger.gexpect.PositionCurve`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .driver import Driver
from .errors import ContractViolation, InvalidArgument
from .gexpect import PositionCurve, _terminal_array, solve_bsde
from .lattice import FULL_BINARY, Lattice, NodeProcess


@dataclass
class Strategy:
    """Units held per node; ``theta.values(k)`` applies on [t_k, t_{k+1}).

    Simple strategies are piecewise constant in time with level-constant
    values and record the levels at which they jump.
    """

    theta: NodeProcess
    simple: bool = False
    jump_levels: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.theta.n_levels < self.theta.lattice.n_steps:
            raise InvalidArgument("strategy must cover levels 0..n-1")


def constant_strategy(lattice: Lattice, y: float) -> Strategy:
    """Hold ``y`` units from time 0 to maturity."""
    theta = NodeProcess.constant(lattice, y, n_levels=lattice.n_steps)
    jumps = (0,) if y != 0.0 else ()
    return Strategy(theta=theta, simple=True, jump_levels=jumps)


def piecewise_constant_strategy(
    lattice: Lattice, segments: list[tuple[int, float]]
) -> Strategy:
    """Simple strategy from (start_level, value) segments.

    Segments must start at level 0 and be strictly increasing in level;
    each value applies until the next segment begins.
    """
    if not segments or segments[0][0] != 0:
        raise InvalidArgument("segments must start at level 0")
    levels = [lv for lv, _ in segments]
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise InvalidArgument("segment levels must be strictly increasing")
    if levels[-1] >= lattice.n_steps:
        raise InvalidArgument("segment start beyond the last trading level")
    values = np.zeros(lattice.n_steps)
    for i, (lv, val) in enumerate(segments):
        end = segments[i + 1][0] if i + 1 < len(segments) else lattice.n_steps
        values[lv:end] = val
    theta = NodeProcess(
        lattice,
        [np.full(lattice.level_size(k), values[k]) for k in range(lattice.n_steps)],
    )
    prev = np.concatenate([[0.0], values[:-1]])
    jumps = tuple(int(k) for k in np.nonzero(values != prev)[0])
    return Strategy(theta=theta, simple=True, jump_levels=jumps)


@dataclass
class WealthPath:
    """Wealth and gains of a strategy on the expanded (full-binary) lattice."""

    lattice: Lattice
    x: NodeProcess
    gains: NodeProcess
    z_theta: NodeProcess
    x0: float


def price_curve(
    lattice: Lattice,
    driver: Driver,
    s_terminal,
    node: tuple[int, int],
    z: float,
    y: float,
    h_m=None,
) -> float:
    """Quoted selling price for y units given inventory -z, at a lattice node.

    P = Pi(H_M + z S) - Pi(H_M + (z - y) S), both evaluated at ``node``.
    """
    s = _terminal_array(lattice, s_terminal)
    h = np.zeros_like(s) if h_m is None else _terminal_array(lattice, h_m)
    k, j = node
    pi_hold = solve_bsde(lattice, driver, h + z * s).pi.values(k)[j]
    pi_after = solve_bsde(lattice, driver, h + (z - y) * s).pi.values(k)[j]
    return float(pi_hold - pi_after)


def _binary_and_curve(lattice, driver, s_terminal, y_grid):
    if lattice.topology == FULL_BINARY:
        raise InvalidArgument("pass the recombining lattice; expansion is internal")
    binary = lattice.expand_full_binary()
    curve = PositionCurve(
        lattice,
        driver,
        s_terminal,
        y_grid=None if (driver.is_homogeneous and y_grid is None) else y_grid,
    )
    return binary, curve


def pnl_process(
    lattice: Lattice,
    driver: Driver,
    s_terminal,
    strategy: Strategy,
    x0: float,
    y_grid=None,
) -> WealthPath:
    """Forward accumulation of trading gains along every path.

    gains_{k+1} = gains_k - g(t_k, Z^theta_k) dt + Z^theta_k dW

    The traded position integrand is looked up from the position curve (or
    the homogeneous scaling shortcut); positions outside the y-grid hull
    are refused rather than extrapolated.
    """
    binary, curve = _binary_and_curve(lattice, driver, s_terminal, y_grid)
    grid = lattice.grid
    dt, sq = grid.dt, grid.sqrt_dt

    gains_levels = [np.zeros(1)]
    z_levels = []
    for k in range(lattice.n_steps):
        theta_k = strategy.theta.values(k)
        z_rec = curve.z_level(k, theta_k)
        z_bin = lattice.lift_level(z_rec, k, binary)
        g_bin = np.asarray(driver.g(grid.t(k), z_bin), dtype=float)
        prev = gains_levels[k]
        nxt = np.empty(2 * prev.size)
        nxt[0::2] = prev - g_bin * dt - z_bin * sq
        nxt[1::2] = prev - g_bin * dt + z_bin * sq
        gains_levels.append(nxt)
        z_levels.append(z_bin)

    gains = NodeProcess(binary, gains_levels)
    x = gains.map(lambda lv: lv + x0)
    z_theta = NodeProcess(binary, z_levels)
    return WealthPath(lattice=binary, x=x, gains=gains, z_theta=z_theta, x0=x0)


def simple_strategy_pnl(
    lattice: Lattice, driver: Driver, s_terminal, strategy: Strategy
) -> np.ndarray:
    """Terminal P&L of a simple strategy, priced trade by trade.

    theta_T * S minus the sum over jump times of the quoted prices
    P_t(-theta_t, d theta_t), evaluated path-wise; returned on the terminal
    level of the full-binary expansion (same ordering as
    :func:`pnl_process`).
    """
    if not strategy.simple:
        raise ContractViolation("strategy is not flagged simple")
    s = _terminal_array(lattice, s_terminal)
    binary = lattice.expand_full_binary()
    n = lattice.n_steps

    theta_levels = [float(strategy.theta.values(k)[0]) for k in range(n)]
    for k in range(n):
        if np.ptp(strategy.theta.values(k)) != 0.0:
            raise ContractViolation(
                "simple strategies must be level-constant for trade-by-trade pricing"
            )

    total_cost = np.zeros(binary.level_size(n))
    for k in strategy.jump_levels:
        theta_old = theta_levels[k - 1] if k > 0 else 0.0
        theta_new = theta_levels[k]
        pi_hold = solve_bsde(lattice, driver, -theta_old * s).pi.values(k)
        pi_after = solve_bsde(lattice, driver, -theta_new * s).pi.values(k)
        price_nodes = pi_hold - pi_after
        # book the cost at the path's level-k ancestor and carry it to maturity
        carried = lattice.lift_level(price_nodes, k, binary)
        for _ in range(k, n):
            doubled = np.empty(2 * carried.size)
            doubled[0::2] = carried
            doubled[1::2] = carried
            carried = doubled
        total_cost += carried

    s_bin = lattice.lift_level(s, n, binary)
    theta_T = theta_levels[-1]
    return theta_T * s_bin - total_cost


def check_admissible(
    lattice: Lattice,
    driver: Driver,
    s_terminal,
    strategy: Strategy,
    y_grid=None,
) -> float:
    """Lattice value of E int_0^T |Z^theta_t|^2 dt (finite at desk scale)."""
    if lattice.topology == FULL_BINARY:
        raise InvalidArgument("pass the recombining lattice")
    curve = PositionCurve(
        lattice,
        driver,
        s_terminal,
        y_grid=None if (driver.is_homogeneous and y_grid is None) else y_grid,
    )
    total = 0.0
    for k in range(lattice.n_steps):
        z = curve.z_level(k, strategy.theta.values(k))
        total += lattice.root_expectation(z * z) * lattice.grid.dt
    return float(total)


def expected_terminal_utility(
    lattice: Lattice,
    driver: Driver,
    z_levels: list[np.ndarray] | NodeProcess,
    x0: float,
    utility,
) -> float:
    """Exact lattice E[U(x0 + gains_T)] for a node-valued integrand.

    CARA utilities factor multiplicatively over path increments, so the
    expectation collapses to a backward recursion on the recombining
    lattice at any depth.  Other utilities fall back to full path
    enumeration, which is capped by the binary-expansion limit.
    """
    if isinstance(z_levels, NodeProcess):
        z_levels = z_levels.levels
    grid = lattice.grid
    dt, sq = grid.dt, grid.sqrt_dt
    n = lattice.n_steps
    if getattr(utility, "kind", None) == "cara":
        gamma_a = utility.gamma_a
        phi = np.ones(lattice.level_size(n))
        for k in range(n - 1, -1, -1):
            z = np.asarray(z_levels[k], dtype=float)
            g = np.asarray(driver.g(grid.t(k), z), dtype=float)
            down, up = lattice.split_children(phi)
            inc_up = -g * dt + z * sq
            inc_dn = -g * dt - z * sq
            phi = 0.5 * (
                np.exp(-gamma_a * inc_up) * up + np.exp(-gamma_a * inc_dn) * down
            )
        return float(-np.exp(-gamma_a * x0) * phi[0])

    binary = lattice.expand_full_binary()
    gains = np.zeros(1)
    for k in range(n):
        z_bin = lattice.lift_level(np.asarray(z_levels[k], dtype=float), k, binary)
        g_bin = np.asarray(driver.g(grid.t(k), z_bin), dtype=float)
        nxt = np.empty(2 * gains.size)
        nxt[0::2] = gains - g_bin * dt - z_bin * sq
        nxt[1::2] = gains - g_bin * dt + z_bin * sq
        gains = nxt
    return float(np.mean(utility.u(x0 + gains)))
