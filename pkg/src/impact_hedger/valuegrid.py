"""Dynamic programming for the value function V(t, x) on a time-wealth grid.

Deterministic-coefficient Markov case: V is deterministic, the martingale
coefficient field alpha is carried but identically zero, and the surface
satisfies dV/dt + L V = 0 with

    L V = sup over attainable integrands of
          -g(t, Z) V_x + (1/2) Z^2 V_xx + Z alpha_x.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import PchipInterpolator

from .driver import Driver
from .errors import (
    ConcavityViolation,
    ControlBracketExhausted,
    InvalidArgument,
    InverseDomainError,
)
from .lattice import FULL_BINARY, Lattice, NodeProcess, TimeGrid
from .optimizer import FbsdeSolution, UtilitySpec, verify_optimality

# stencil-safe interior margin, in grid cells per side
_EDGE_CELLS = 3


@dataclass(frozen=True)
class WealthGrid:
    """Uniform wealth grid [x_min, x_max] with n_x points."""

    x_min: float
    x_max: float
    n_x: int

    def __post_init__(self) -> None:
        if not self.x_max > self.x_min:
            raise InvalidArgument("x_max must exceed x_min")
        if self.n_x < 2 * _EDGE_CELLS + 3:
            raise InvalidArgument("wealth grid too coarse for interior stencils")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def interior(self) -> slice:
        return slice(_EDGE_CELLS, self.n_x - _EDGE_CELLS)


@dataclass(frozen=True)
class ControlSpec:
    """Attainable-integrand description for the pointwise maximization.

    ``interval``: integrands range over [z_lo, z_hi] (complete market).
    ``homogeneous``: integrands are theta * z_scale(t) with theta >= 0,
    z_scale being the deterministic unit-short integrand.
    """

    kind: str = "interval"
    z_lo: float = -1.0
    z_hi: float = 1.0
    z_scale: float | Callable[[float], float] = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("interval", "homogeneous"):
            raise InvalidArgument(f"unknown control kind {self.kind!r}")
        if self.kind == "interval" and not self.z_hi > self.z_lo:
            raise InvalidArgument("z_hi must exceed z_lo")

    def scale_at(self, t: float) -> float:
        return float(self.z_scale(t)) if callable(self.z_scale) else float(self.z_scale)


@dataclass
class AnalyticSurface:
    """Closed-form surface with exact derivatives, for oracle injections."""

    v: Callable[[float, np.ndarray], np.ndarray]
    v_t: Callable[[float, np.ndarray], np.ndarray]
    v_x: Callable[[float, np.ndarray], np.ndarray]
    v_xx: Callable[[float, np.ndarray], np.ndarray]
    v_xxx: Callable[[float, np.ndarray], np.ndarray] | None = None


@dataclass
class ValueSurface:
    """V on the time-wealth grid, with stencils and the (zero) alpha field."""

    tgrid: TimeGrid
    xgrid: WealthGrid
    v: np.ndarray  # shape (n_t + 1, n_x)
    control: ControlSpec
    alpha: np.ndarray = field(default=None)  # martingale coefficient field
    analytic: AnalyticSurface | None = None

    def __post_init__(self) -> None:
        expected = (self.tgrid.n_steps + 1, self.xgrid.n_x)
        if self.v.shape != expected:
            raise InvalidArgument(f"surface shape {self.v.shape}, expected {expected}")
        if self.alpha is None:
            self.alpha = np.zeros_like(self.v)

    def alpha_x(self, k: int) -> np.ndarray:
        """Wealth derivative of the martingale coefficient (zero field)."""
        return np.zeros(self.xgrid.n_x)

    def v_x(self, k: int) -> np.ndarray:
        if self.analytic is not None:
            return np.asarray(self.analytic.v_x(self.tgrid.t(k), self.xgrid.x))
        return _central_first(self.v[k], self.xgrid.dx)

    def v_xx(self, k: int) -> np.ndarray:
        if self.analytic is not None:
            return np.asarray(self.analytic.v_xx(self.tgrid.t(k), self.xgrid.x))
        return _central_second(self.v[k], self.xgrid.dx)

    def check_shape_in_wealth(self, tol: float = 1e-10) -> None:
        """Interior monotonicity and strict concavity in x, with slack ``tol``."""
        sl = self.xgrid.interior
        for k in range(self.tgrid.n_steps + 1):
            row = self.v[k, sl]
            if np.any(np.diff(row) <= -tol):
                raise ConcavityViolation(f"surface not increasing in wealth at slice {k}")
            if np.any(np.diff(row, n=2) >= tol):
                raise ConcavityViolation(f"surface not strictly concave at slice {k}")


def _central_first(row: np.ndarray, dx: float) -> np.ndarray:
    out = np.empty_like(row)
    out[1:-1] = (row[2:] - row[:-2]) / (2.0 * dx)
    out[0] = (row[1] - row[0]) / dx
    out[-1] = (row[-1] - row[-2]) / dx
    return out


def _central_second(row: np.ndarray, dx: float) -> np.ndarray:
    out = np.empty_like(row)
    out[1:-1] = (row[2:] - 2.0 * row[1:-1] + row[:-2]) / (dx * dx)
    out[0] = out[1]
    out[-1] = out[-2]
    return out


@dataclass
class PolicySlice:
    """Maximizing integrand and holdings per (t, x) grid point."""

    upsilon: np.ndarray  # shape (n_t, n_x)
    theta_hat: np.ndarray  # shape (n_t, n_x)


def _maximizer_row(
    driver: Driver,
    control: ControlSpec,
    t: float,
    vx: np.ndarray,
    vxx: np.ndarray,
    alpha_x: np.ndarray,
    force_search: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise maximizer of -g(t,z) V_x + z^2 V_xx / 2 + z alpha_x per x.

    Returns (upsilon, theta_hat).  Closed forms cover the quadratic family
    and the homogeneous cone; anything else is bracketed by golden-section
    search on the control interval.
    """
    if np.any(vxx >= 0):
        raise ConcavityViolation("V_xx must be negative where the operator is evaluated")

    if control.kind == "homogeneous":
        zs = control.scale_at(t)
        g_zs = float(driver.eval(t, zs))
        theta1 = (-zs * alpha_x + g_zs * vx) / (zs * zs * vxx)
        theta_hat = np.maximum(theta1, 0.0)
        return theta_hat * zs, theta_hat

    quad = driver.as_quadratic_family(t)
    if quad is not None and not force_search:
        gamma_c, eta_c = quad
        ups = -(eta_c * vx + alpha_x) / (vxx - gamma_c * vx)
    else:
        ups = _golden_max_rows(driver, t, vx, vxx, alpha_x, control.z_lo, control.z_hi)
    edge = 1e-9 * (control.z_hi - control.z_lo)
    if np.any(ups <= control.z_lo + edge) or np.any(ups >= control.z_hi - edge):
        raise ControlBracketExhausted(
            "control maximizer reached the search boundary; widen [z_lo, z_hi]"
        )
    return ups, ups.copy()


def _golden_max_rows(
    driver: Driver,
    t: float,
    vx: np.ndarray,
    vxx: np.ndarray,
    alpha_x: np.ndarray,
    lo: float,
    hi: float,
    iters: int = 80,
) -> np.ndarray:
    """Vectorized golden-section maximization of the operator integrand."""

    def phi(z: np.ndarray) -> np.ndarray:
        return -np.asarray(driver.g(t, z)) * vx + 0.5 * z * z * vxx + z * alpha_x

    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a = np.full_like(vx, lo)
    b = np.full_like(vx, hi)
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc = phi(c)
    fd = phi(d)
    for _ in range(iters):
        take_left = fc >= fd
        b = np.where(take_left, d, b)
        a = np.where(take_left, a, c)
        c = b - inv_phi * (b - a)
        d = a + inv_phi * (b - a)
        fc = phi(c)
        fd = phi(d)
    return 0.5 * (a + b)


def dp_value(
    tgrid: TimeGrid,
    xgrid: WealthGrid,
    driver: Driver,
    utility: UtilitySpec,
    control: ControlSpec,
    boundary_pad: float | None = None,
) -> tuple[ValueSurface, PolicySlice]:
    """Backward dynamic programming sweep for the value surface.

    Each slice maximizes the two-branch continuation
    (V(t+dt, x - g dt + Z sqrt(dt)) + V(t+dt, x - g dt - Z sqrt(dt))) / 2
    at the first-order maximizer of the operator integrand; off-grid
    continuation values use monotone cubic interpolation.

    The sweep runs on a ghost-padded grid so the scheme's own boundary
    layer stays outside the requested surface; ``boundary_pad`` widens the
    computational grid on each side (default 15 percent of the range).
    """
    pad = 0.15 * (xgrid.x_max - xgrid.x_min) if boundary_pad is None else boundary_pad
    if pad < 0:
        raise InvalidArgument("boundary_pad must be nonnegative")
    n_pad = int(np.ceil(pad / xgrid.dx))
    wide = WealthGrid(
        xgrid.x_min - n_pad * xgrid.dx,
        xgrid.x_max + n_pad * xgrid.dx,
        xgrid.n_x + 2 * n_pad,
    )

    n_t = tgrid.n_steps
    dt = tgrid.dt
    sq = tgrid.sqrt_dt
    x = wide.x

    v = np.empty((n_t + 1, wide.n_x))
    v[n_t] = np.asarray(utility.u(x), dtype=float)
    upsilon = np.empty((n_t, wide.n_x))
    theta_hat = np.empty((n_t, wide.n_x))

    for k in range(n_t - 1, -1, -1):
        t = tgrid.t(k)
        row_next = v[k + 1]
        interp = PchipInterpolator(x, row_next, extrapolate=True)
        vx = _central_first(row_next, wide.dx)
        vxx = _central_second(row_next, wide.dx)
        ups, th = _maximizer_row(driver, control, t, vx, vxx, np.zeros_like(vx))
        g_vals = np.asarray(driver.g(t, ups), dtype=float)
        base = x - g_vals * dt
        v[k] = 0.5 * (interp(base + ups * sq) + interp(base - ups * sq))
        upsilon[k] = ups
        theta_hat[k] = th

    keep = slice(n_pad, n_pad + xgrid.n_x) if n_pad else slice(None)
    surface = ValueSurface(
        tgrid=tgrid, xgrid=xgrid, v=np.ascontiguousarray(v[:, keep]), control=control
    )
    surface.check_shape_in_wealth()
    policy = PolicySlice(
        upsilon=np.ascontiguousarray(upsilon[:, keep]),
        theta_hat=np.ascontiguousarray(theta_hat[:, keep]),
    )
    return surface, policy


def _locate(tgrid: TimeGrid, xgrid: WealthGrid, t: float, x: float) -> tuple[int, int]:
    k = int(round(t / tgrid.dt))
    i = int(round((x - xgrid.x_min) / xgrid.dx))
    if not (0 <= k <= tgrid.n_steps) or abs(t - tgrid.t(k)) > 1e-9 * max(1.0, tgrid.horizon):
        raise InvalidArgument(f"t={t} is not a grid time")
    xi = xgrid.x_min + i * xgrid.dx
    if not (0 <= i < xgrid.n_x) or abs(x - xi) > 1e-9 * max(1.0, abs(x) + 1.0):
        raise InvalidArgument(f"x={x} is not a grid point")
    interior = xgrid.interior
    if not (interior.start <= i < interior.stop):
        raise InvalidArgument("grid point lies in the boundary layer")
    return k, i


def lv_operator(
    surface: ValueSurface,
    driver: Driver,
    t: float,
    x: float,
    force_search: bool = False,
) -> tuple[float, float]:
    """Operator value and maximizing integrand at an interior grid point."""
    k, i = _locate(surface.tgrid, surface.xgrid, t, x)
    vx = surface.v_x(k)
    vxx = surface.v_xx(k)
    ax = surface.alpha_x(k)
    ups_row, _ = _maximizer_row(
        driver, surface.control, t, vx, vxx, ax, force_search=force_search
    )
    u = float(ups_row[i])
    lv = float(
        -float(driver.eval(t, u)) * vx[i] + 0.5 * u * u * vxx[i] + u * ax[i]
    )
    return lv, u


@dataclass
class BspdeResidualReport:
    """Sup-norm residual of dV/dt + L V over the reported interior."""

    max_residual: float
    band_cells: int  # grid cells skipped around holdings sign changes


def residual_slice(
    surface: ValueSurface, driver: Driver, k: int
) -> tuple[np.ndarray, np.ndarray]:
    """|dV/dt + L V| across one interior time slice, with the excluded mask.

    Homogeneous control may lose smoothness where the holdings switch on;
    a one-cell band around those sign changes is masked out.
    """
    tgrid, xgrid = surface.tgrid, surface.xgrid
    if not 1 <= k <= tgrid.n_steps - 1:
        raise InvalidArgument("central time difference needs an interior slice")
    t = tgrid.t(k)
    if surface.analytic is not None:
        v_t = np.asarray(surface.analytic.v_t(t, xgrid.x))
    else:
        v_t = (surface.v[k + 1] - surface.v[k - 1]) / (2.0 * tgrid.dt)
    vx = surface.v_x(k)
    vxx = surface.v_xx(k)
    ax = surface.alpha_x(k)
    ups, th = _maximizer_row(driver, surface.control, t, vx, vxx, ax)
    lv = -np.asarray(driver.g(t, ups)) * vx + 0.5 * ups**2 * vxx + ups * ax
    resid = np.abs(v_t + lv)
    mask = np.zeros_like(resid, dtype=bool)
    if surface.control.kind == "homogeneous":
        on = th > 0
        switch = np.nonzero(on[1:] != on[:-1])[0]
        for s in switch:
            mask[max(s - 1, 0) : s + 2] = True
    return resid, mask


def bspde_residual(surface: ValueSurface, driver: Driver) -> BspdeResidualReport:
    """Max |dV/dt + L V| over interior grid points, central time differences."""
    sl = surface.xgrid.interior
    worst = 0.0
    band_cells = 0
    for k in range(1, surface.tgrid.n_steps):
        resid, mask = residual_slice(surface, driver, k)
        band_cells += int(np.count_nonzero(mask[sl]))
        keep = ~mask[sl]
        if np.any(keep):
            worst = max(worst, float(np.max(resid[sl][keep])))
    return BspdeResidualReport(max_residual=worst, band_cells=band_cells)


def fbsde_from_surface(
    surface: ValueSurface,
    policy: PolicySlice,
    lattice: Lattice,
    utility: UtilitySpec,
    x0: float,
    driver: Driver,
) -> FbsdeSolution:
    """Recover the forward-backward triple from a value surface and policy.

    Wealth follows the policy integrand; the backward value is
    I(V_x(t, X)) - X and its martingale part is
    (upsilon V_xx + alpha_x) / U''(X + zeta) - upsilon.
    """
    tgrid, xgrid = surface.tgrid, surface.xgrid
    if lattice.n_steps != tgrid.n_steps or abs(lattice.grid.horizon - tgrid.horizon) > 1e-12:
        raise InvalidArgument("lattice and surface must share the time grid")
    grid = lattice.grid
    dt, sq = grid.dt, grid.sqrt_dt
    n = lattice.n_steps
    x_axis = xgrid.x

    x_levels = [np.full(1, float(x0))]
    h_levels: list[np.ndarray] = []
    consistency = 0.0
    for k in range(n):
        xk = x_levels[k]
        ups = np.interp(xk, x_axis, policy.upsilon[k])
        g = np.asarray(driver.g(grid.t(k), ups), dtype=float)
        up = xk - g * dt + ups * sq
        down = xk - g * dt - ups * sq
        if lattice.topology == FULL_BINARY:
            nxt = np.empty(2 * xk.size)
            nxt[0::2] = down
            nxt[1::2] = up
        else:
            nxt = np.empty(xk.size + 1)
            nxt[0] = down[0]
            nxt[-1] = up[-1]
            if xk.size > 1:
                consistency = max(
                    consistency, float(np.max(np.abs(up[:-1] - down[1:])))
                )
                nxt[1:-1] = 0.5 * (up[:-1] + down[1:])
        h_levels.append(ups)
        x_levels.append(nxt)

    zeta_levels = []
    m_levels = []
    for k in range(n + 1):
        xk = x_levels[k]
        # smooth off-grid reads: linear interpolation of the stencil fields
        # leaves cell-scale noise that the marginal utility amplifies
        vx = PchipInterpolator(x_axis, surface.v_x(k), extrapolate=True)(xk)
        if np.any(vx <= 0):
            raise InverseDomainError("V_x must be positive to invert the marginal utility")
        zeta = np.asarray(utility.inverse_marginal(vx), dtype=float) - xk
        zeta_levels.append(zeta)
        if k < n:
            vxx = PchipInterpolator(x_axis, surface.v_xx(k), extrapolate=True)(xk)
            ups = h_levels[k]
            u2 = np.asarray(utility.u2(xk + zeta))
            m_levels.append((ups * vxx) / u2 - ups)

    theta_levels = [
        np.interp(x_levels[k], x_axis, policy.theta_hat[k]) for k in range(n)
    ]
    sol = FbsdeSolution(
        x=NodeProcess(lattice, x_levels),
        zeta=NodeProcess(lattice, zeta_levels),
        m=NodeProcess(lattice, m_levels),
        h=NodeProcess(lattice, h_levels),
        theta=NodeProcess(lattice, theta_levels),
        residuals=None,
        forward_consistency=consistency,
    )
    sol.residuals = verify_optimality(sol, driver, utility)
    return sol


def cara_closed_form_surface(
    tgrid: TimeGrid,
    xgrid: WealthGrid,
    gamma: float,
    eta,
    gamma_a: float,
    control: ControlSpec | None = None,
) -> ValueSurface:
    """Inject the explicit CARA surface V = -exp(-gamma_a (x + zeta_t)).

    zeta_t is the remaining-variance integral of the measure drift over
    2 (gamma + gamma_a); derivatives are attached analytically.
    """
    eta_fn = eta if callable(eta) else (lambda t, _e=float(eta): _e)
    n_t = tgrid.n_steps
    dt = tgrid.dt

    def zeta_of(t: float) -> float:
        # piecewise-constant eta on the grid
        k0 = int(round(t / dt))
        return sum(
            eta_fn(tgrid.t(i)) ** 2 * dt for i in range(k0, n_t)
        ) / (2.0 * (gamma + gamma_a))

    def v(t, x):
        return -np.exp(-gamma_a * (np.asarray(x) + zeta_of(t)))

    def v_t(t, x):
        k0 = int(round(t / dt))
        zdot = -eta_fn(tgrid.t(min(k0, n_t - 1))) ** 2 / (2.0 * (gamma + gamma_a))
        return -gamma_a * zdot * v(t, x)

    def v_x(t, x):
        return -gamma_a * v(t, x)

    def v_xx(t, x):
        return gamma_a**2 * v(t, x)

    def v_xxx(t, x):
        return -(gamma_a**3) * v(t, x)

    grid_v = np.stack([v(tgrid.t(k), xgrid.x) for k in range(n_t + 1)])
    return ValueSurface(
        tgrid=tgrid,
        xgrid=xgrid,
        v=grid_v,
        control=control or ControlSpec(kind="interval", z_lo=-1.0, z_hi=1.0),
        analytic=AnalyticSurface(v=v, v_t=v_t, v_x=v_x, v_xx=v_xx, v_xxx=v_xxx),
    )
