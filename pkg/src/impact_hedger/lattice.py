"""Discrete Brownian scaffold: binomial lattices and adapted node processes.

The recombining lattice is the default workhorse: level ``k`` holds ``k + 1``
nodes, node ``(k, j)`` carries the Brownian value ``(2j - k) * sqrt(dt)`` where
``j`` counts up-moves, and both branches have probability one half.  A
non-recombining ("full-binary") variant supports state-dependent coefficients
and path-dependent wealth accounting; it is capped at 22 steps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InvalidArgument, ModeConflict

RECOMBINING = "recombining"
FULL_BINARY = "full-binary"

FULL_BINARY_MAX_STEPS = 22

# Two-parent agreement tolerance used when forcing recombination.
_RECOMBINE_TOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [0, T] into ``n_steps`` intervals."""

    horizon: float
    n_steps: int

    def __post_init__(self) -> None:
        if not self.horizon > 0.0:
            raise InvalidArgument(f"horizon must be positive, got {self.horizon}")
        if self.n_steps < 1:
            raise InvalidArgument(f"n_steps must be >= 1, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def sqrt_dt(self) -> float:
        return float(np.sqrt(self.dt))

    def t(self, k: int) -> float:
        return k * self.dt

    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


class Lattice:
    """Binomial tree over a :class:`TimeGrid`.

    Immutable after construction; safe to share between solvers.  Level
    buffers are dense arrays; on the recombining topology the up-child of
    node ``j`` sits at slot ``j + 1`` of the next level and the down-child
    at slot ``j``.  On the full-binary topology the children of node ``j``
    are ``2j`` (down) and ``2j + 1`` (up).
    """

    def __init__(self, grid: TimeGrid, topology: str = RECOMBINING):
        if topology not in (RECOMBINING, FULL_BINARY):
            raise InvalidArgument(f"unknown topology {topology!r}")
        if topology == FULL_BINARY and grid.n_steps > FULL_BINARY_MAX_STEPS:
            raise InvalidArgument(
                f"full-binary mode is capped at {FULL_BINARY_MAX_STEPS} steps, "
                f"got {grid.n_steps}"
            )
        self.grid = grid
        self.topology = topology
        if topology == FULL_BINARY:
            # up-move counts per node, level by level
            ups = [np.zeros(1, dtype=np.int64)]
            for _ in range(grid.n_steps):
                prev = ups[-1]
                nxt = np.empty(2 * prev.size, dtype=np.int64)
                nxt[0::2] = prev
                nxt[1::2] = prev + 1
                ups.append(nxt)
            self._ups = ups
        else:
            self._ups = None

    # -- shape -----------------------------------------------------------

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def level_size(self, k: int) -> int:
        self._check_level(k)
        if self.topology == RECOMBINING:
            return k + 1
        return 1 << k

    def up_counts(self, k: int) -> np.ndarray:
        """Number of up-moves leading to each node of level ``k``."""
        self._check_level(k)
        if self.topology == RECOMBINING:
            return np.arange(k + 1, dtype=np.int64)
        return self._ups[k]

    def w_values(self, k: int) -> np.ndarray:
        """Brownian values at level ``k``: (2 * ups - k) * sqrt(dt)."""
        return (2.0 * self.up_counts(k) - k) * self.grid.sqrt_dt

    def increments(self) -> tuple[np.ndarray, np.ndarray]:
        """Branch increments (+sqrt(dt), -sqrt(dt)) and probabilities (1/2, 1/2)."""
        s = self.grid.sqrt_dt
        return np.array([s, -s]), np.array([0.5, 0.5])

    # -- sweep primitives --------------------------------------------------

    def split_children(self, values_next: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a level-(k+1) buffer into (down-child, up-child) views per parent."""
        v = np.asarray(values_next, dtype=float)
        if self.topology == RECOMBINING:
            if v.size < 2:
                raise InvalidArgument("child level must have at least 2 nodes")
            return v[:-1], v[1:]
        if v.size % 2 != 0:
            raise InvalidArgument("full-binary child level must have even size")
        return v[0::2], v[1::2]

    def conditional_expectation(self, values_next: np.ndarray) -> np.ndarray:
        """One-step discrete E[. | F_k] applied to a level-(k+1) buffer."""
        down, up = self.split_children(values_next)
        return 0.5 * (down + up)

    def martingale_projection(self, values_next: np.ndarray) -> np.ndarray:
        """Integrand Z_k = -E_k[v_{k+1} dW] / dt for the backward convention.

        Projection of the next-level buffer on the Brownian increment with
        the sign fixed by the backward equation's ``- Z dW`` term.
        """
        down, up = self.split_children(values_next)
        return -(up - down) / (2.0 * self.grid.sqrt_dt)

    def root_expectation(self, values: np.ndarray, level: int | None = None) -> float:
        """Expectation at the root of a buffer at the given level (tower property)."""
        v = np.asarray(values, dtype=float)
        while v.size > 1:
            v = self.conditional_expectation(v)
        return float(v[0])

    def level_probabilities(self, k: int) -> np.ndarray:
        """Node probabilities at level ``k`` under the (1/2, 1/2) branching."""
        self._check_level(k)
        if self.topology == FULL_BINARY:
            n = 1 << k
            return np.full(n, 1.0 / n)
        j = np.arange(k + 1)
        from scipy.special import gammaln

        logp = gammaln(k + 1) - gammaln(j + 1) - gammaln(k - j + 1) - k * np.log(2.0)
        return np.exp(logp)

    # -- topology change ---------------------------------------------------

    def expand_full_binary(self) -> "Lattice":
        """Full-binary lattice on the same time grid (identity if already binary)."""
        if self.topology == FULL_BINARY:
            return self
        return Lattice(self.grid, FULL_BINARY)

    def lift_level(self, values: np.ndarray, k: int, binary: "Lattice") -> np.ndarray:
        """Map a recombining level-``k`` buffer onto the expanded binary level."""
        if self.topology != RECOMBINING or binary.topology != FULL_BINARY:
            raise InvalidArgument("lift_level maps recombining buffers onto binary ones")
        return np.asarray(values, dtype=float)[binary.up_counts(k)]

    def _check_level(self, k: int) -> None:
        if not 0 <= k <= self.grid.n_steps:
            raise InvalidArgument(f"level {k} outside [0, {self.grid.n_steps}]")

    def __repr__(self) -> str:  # pragma: no cover
        return (
            f"Lattice(T={self.grid.horizon}, n={self.grid.n_steps}, "
            f"topology={self.topology!r})"
        )


def build_binomial(T: float, n_steps: int) -> Lattice:
    """Recombining binomial lattice for the Brownian filtration on [0, T]."""
    return Lattice(TimeGrid(T, n_steps), RECOMBINING)


def build_full_binary(T: float, n_steps: int) -> Lattice:
    """Non-recombining binary lattice; one node per path prefix."""
    return Lattice(TimeGrid(T, n_steps), FULL_BINARY)


def take_conditional_expectation(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Level-(k+1) values -> level-k values, recombining convention.

    output[j] = (input[j] + input[j+1]) / 2
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size < 2:
        raise InvalidArgument("expected a 1-d buffer with at least 2 nodes")
    return 0.5 * (v[:-1] + v[1:])


def project_martingale_increment(
    values: Sequence[float] | np.ndarray, dt: float
) -> np.ndarray:
    """Level-(k+1) values -> Z values at level k, recombining convention.

    output[j] = -(input[j+1] - input[j]) / (2 * sqrt(dt))
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size < 2:
        raise InvalidArgument("expected a 1-d buffer with at least 2 nodes")
    if not dt > 0.0:
        raise InvalidArgument("dt must be positive")
    return -(v[1:] - v[:-1]) / (2.0 * np.sqrt(dt))


class NodeProcess:
    """An adapted process: one value per lattice node.

    ``levels`` holds one dense array per level starting from level 0.  A
    process may stop short of the terminal level (integrands such as Z are
    defined on levels ``0 .. n-1`` only).
    """

    __slots__ = ("lattice", "levels")

    def __init__(self, lattice: Lattice, levels: Sequence[np.ndarray]):
        if not levels:
            raise InvalidArgument("a NodeProcess needs at least one level")
        if len(levels) > lattice.n_steps + 1:
            raise InvalidArgument("more levels than the lattice has")
        arrs = []
        for k, lv in enumerate(levels):
            a = np.asarray(lv, dtype=float)
            if a.shape != (lattice.level_size(k),):
                raise InvalidArgument(
                    f"level {k} has size {a.shape}, expected ({lattice.level_size(k)},)"
                )
            arrs.append(a)
        self.lattice = lattice
        self.levels = arrs

    # -- constructors ------------------------------------------------------

    @classmethod
    def constant(cls, lattice: Lattice, value: float, n_levels: int | None = None) -> "NodeProcess":
        n = lattice.n_steps + 1 if n_levels is None else n_levels
        return cls(lattice, [np.full(lattice.level_size(k), float(value)) for k in range(n)])

    @classmethod
    def from_levels(cls, lattice: Lattice, levels: Sequence[np.ndarray]) -> "NodeProcess":
        return cls(lattice, levels)

    @classmethod
    def brownian(cls, lattice: Lattice) -> "NodeProcess":
        return cls(lattice, [lattice.w_values(k) for k in range(lattice.n_steps + 1)])

    # -- access ------------------------------------------------------------

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def values(self, k: int) -> np.ndarray:
        return self.levels[k]

    @property
    def terminal(self) -> np.ndarray:
        return self.levels[-1]

    @property
    def root(self) -> float:
        return float(self.levels[0][0])

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "NodeProcess":
        return NodeProcess(self.lattice, [fn(lv) for lv in self.levels])

    def sup_diff(self, other: "NodeProcess") -> float:
        """Largest node-wise absolute difference over the shared levels."""
        n = min(self.n_levels, other.n_levels)
        return max(
            float(np.max(np.abs(self.levels[k] - other.levels[k]))) for k in range(n)
        )

    def sup_abs(self) -> float:
        return max(float(np.max(np.abs(lv))) for lv in self.levels)

    def __add__(self, c: float) -> "NodeProcess":
        return self.map(lambda lv: lv + c)

    def __mul__(self, c: float) -> "NodeProcess":
        return self.map(lambda lv: lv * c)

    __rmul__ = __mul__

    def __repr__(self) -> str:  # pragma: no cover
        return f"NodeProcess(levels={self.n_levels}, root={self.levels[0]})"


@dataclass
class StateSde:
    """Markov state dynamics dR = b(t, R) dt + sigma dW, R_0 = r0.

    ``drift`` may be a constant or a callable ``b(t, r)`` operating on
    arrays.  ``sigma`` must be a positive constant on recombining lattices;
    a callable ``sigma(t, r)`` is accepted in full-binary mode only.
    """

    drift: float | Callable[[float, np.ndarray], np.ndarray]
    sigma: float | Callable[[float, np.ndarray], np.ndarray]
    r0: float

    def drift_at(self, t: float, r: np.ndarray) -> np.ndarray:
        if callable(self.drift):
            return np.asarray(self.drift(t, r), dtype=float) * np.ones_like(r)
        return np.full_like(r, float(self.drift))

    def sigma_at(self, t: float, r: np.ndarray) -> np.ndarray:
        if callable(self.sigma):
            return np.asarray(self.sigma(t, r), dtype=float) * np.ones_like(r)
        return np.full_like(r, float(self.sigma))

    def drift_gradient(self, t: float, r: np.ndarray, step: float = 1e-6) -> np.ndarray:
        """d b / d r by central differences (used by variational sweeps)."""
        h = step * (1.0 + np.abs(r))
        return (self.drift_at(t, r + h) - self.drift_at(t, r - h)) / (2.0 * h)


def simulate_state(lattice: Lattice, sde: StateSde) -> NodeProcess:
    """Euler path of the state SDE on the lattice.

    On the recombining topology both parents of an interior node must
    predict the same child value; any disagreement means the coefficients
    are state-dependent and the caller should use a full-binary lattice.
    """
    if lattice.topology == RECOMBINING and callable(sde.sigma):
        raise ModeConflict(
            "state-dependent volatility requires a full-binary lattice"
        )
    dt = lattice.grid.dt
    sq = lattice.grid.sqrt_dt
    levels = [np.array([sde.r0], dtype=float)]
    for k in range(lattice.n_steps):
        r = levels[-1]
        t = lattice.grid.t(k)
        b = sde.drift_at(t, r)
        s = sde.sigma_at(t, r)
        up = r + b * dt + s * sq
        down = r + b * dt - s * sq
        if lattice.topology == FULL_BINARY:
            nxt = np.empty(2 * r.size)
            nxt[0::2] = down
            nxt[1::2] = up
        else:
            nxt = np.empty(r.size + 1)
            nxt[0] = down[0]
            nxt[-1] = up[-1]
            if r.size > 1:
                from_up = up[:-1]      # parent j feeds slot j+1
                from_down = down[1:]   # parent j+1 feeds slot j+1
                gap = np.max(np.abs(from_up - from_down))
                scale = 1.0 + float(np.max(np.abs(r)))
                if gap > _RECOMBINE_TOL * scale:
                    raise ModeConflict(
                        "state-dependent drift does not recombine "
                        f"(level {k + 1}, max parent disagreement {gap:.3e}); "
                        "use a full-binary lattice"
                    )
                nxt[1:-1] = 0.5 * (from_up + from_down)
        levels.append(nxt)
    return NodeProcess(lattice, levels)
