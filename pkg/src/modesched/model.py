"""System, cost, and schedule representations for switched linear systems.

A switched linear system follows exactly one of N time-varying modes
x' = A_j(t) x at every instant. The active mode over a horizon is described
interchangeably as a mode schedule (sequence of modes plus switching times)
or as a switching control (N piecewise-constant 0/1 indicator functions that
sum to one). Both representations and the lossless conversion between them
live here, together with the quadratic cost specification.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError
from .expr import TimeExpr, const_expr, parse_time_expr


def _as_expr(entry) -> TimeExpr:
    if isinstance(entry, TimeExpr):
        return entry
    if isinstance(entry, str):
        return parse_time_expr(entry)
    return const_expr(float(entry))


def _expr_matrix(rows, n: int) -> tuple[tuple[TimeExpr, ...], ...]:
    mat = tuple(tuple(_as_expr(e) for e in row) for row in rows)
    if len(mat) != n or any(len(row) != n for row in mat):
        raise ValueError(f"matrix must be {n}x{n}")
    return mat


def eval_expr_matrix(mat, t):
    """Evaluate a matrix of TimeExpr at scalar t (n,n) or array t (T,n,n)."""
    tt = np.asarray(t, dtype=float)
    n = len(mat)
    if tt.ndim == 0:
        out = np.empty((n, n))
        for i in range(n):
            for j in range(n):
                out[i, j] = mat[i][j](tt)
        return out
    out = np.empty(tt.shape + (n, n))
    for i in range(n):
        for j in range(n):
            out[..., i, j] = mat[i][j](tt)
    return out


@dataclass(frozen=True)
class SwitchedLinearSystem:
    """N linear time-varying modes A_j(t) over an n-dimensional state.

    Mode indices are 1-based throughout the public API; ``labels`` may give
    each mode a human-readable name.
    """

    n: int
    N: int
    modes: tuple  # N matrices, each n x n of TimeExpr
    x0: np.ndarray
    labels: tuple[str, ...] | None = None
    _const_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_entries(cls, modes: Sequence, x0, labels=None) -> "SwitchedLinearSystem":
        """Build from per-mode matrices whose entries are expression strings,
        numbers, or TimeExpr."""
        if len(modes) < 1:
            raise ValueError("need at least one mode")
        n = len(modes[0])
        parsed = tuple(_expr_matrix(m, n) for m in modes)
        x0 = np.asarray(x0, dtype=float).reshape(-1)
        if x0.shape != (n,):
            raise ValueError(f"x0 must have length {n}")
        if labels is not None:
            labels = tuple(str(s) for s in labels)
            if len(labels) != len(parsed):
                raise ValueError("labels must match mode count")
        return cls(n=n, N=len(parsed), modes=parsed, x0=x0, labels=labels)

    def _mode_parts(self, j: int):
        """Cached split of mode j into its constant skeleton and the list of
        time-varying entries."""
        parts = self._const_cache.get(j)
        if parts is None:
            base = np.zeros((self.n, self.n))
            varying = []
            for i, row in enumerate(self.modes[j - 1]):
                for k, e in enumerate(row):
                    if e.is_constant:
                        base[i, k] = e(0.0)
                    else:
                        varying.append((i, k, e))
            if not np.all(np.isfinite(base)):
                raise NumericalError(f"mode {j} has non-finite constant entries")
            parts = (base, tuple(varying))
            self._const_cache[j] = parts
        return parts

    def mode_matrix(self, j: int, t):
        """A_j evaluated at scalar t -> (n,n), or at an array of times ->
        (T,n,n). Mode j is 1-based. Raises NumericalError on non-finite
        entries."""
        if not 1 <= j <= self.N:
            raise ValueError(f"mode index {j} outside 1..{self.N}")
        base, varying = self._mode_parts(j)
        tt = np.asarray(t, dtype=float)
        if tt.ndim == 0:
            out = base.copy()
            for i, k, e in varying:
                out[i, k] = e(tt)
        else:
            out = np.broadcast_to(base, tt.shape + base.shape).copy()
            for i, k, e in varying:
                out[..., i, k] = e(tt)
        if varying and not np.all(np.isfinite(out)):
            raise NumericalError(f"mode {j} has non-finite entries at t={t!r}")
        return out


def eval_mode(sys: SwitchedLinearSystem, j: int, t: float) -> np.ndarray:
    """Entrywise evaluation of mode j's matrix at time t (1-based j)."""
    return sys.mode_matrix(j, float(t))


@dataclass(frozen=True)
class ModeSchedule:
    """Active-mode sequence sigma and strictly increasing switching times tau.

    Segment i runs over the half-open interval [T_{i-1}, T_i); the final
    segment includes its right endpoint.
    """

    sigma: tuple[int, ...]
    tau: tuple[float, ...]
    t0: float
    tM: float

    def __post_init__(self):
        if len(self.sigma) != len(self.tau) + 1:
            raise ValueError("need exactly one more mode than switching time")
        if not self.t0 < self.tM:
            raise ValueError("empty horizon")
        b = (self.t0, *self.tau, self.tM)
        if any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ValueError("switching times must be strictly increasing inside the horizon")
        if any(s < 1 for s in self.sigma):
            raise ValueError("mode indices are 1-based")

    @property
    def M(self) -> int:
        return len(self.sigma)

    @property
    def boundaries(self) -> np.ndarray:
        return np.array((self.t0, *self.tau, self.tM))

    def segment_index(self, t) -> np.ndarray | int:
        """0-based segment index containing time t (array or scalar)."""
        idx = np.searchsorted(np.asarray(self.tau), t, side="right")
        return idx if np.ndim(t) else int(idx)

    def mode_at(self, t):
        """Active (1-based) mode at time t; t = tM belongs to the last segment."""
        idx = self.segment_index(t)
        return np.asarray(self.sigma)[idx] if np.ndim(t) else self.sigma[idx]

    def normalized(self) -> "ModeSchedule":
        """Merge adjacent equal modes and drop zero-length segments."""
        sigma, tau = [self.sigma[0]], []
        for s, T in zip(self.sigma[1:], self.tau):
            if s == sigma[-1]:
                continue
            sigma.append(s)
            tau.append(T)
        return ModeSchedule(tuple(sigma), tuple(tau), self.t0, self.tM)

    def shifted(self, dt: float) -> "ModeSchedule":
        return ModeSchedule(
            self.sigma, tuple(T + dt for T in self.tau), self.t0 + dt, self.tM + dt
        )

    def restrict(self, a: float, b: float, extend: bool = False) -> "ModeSchedule":
        """Schedule over [a, b]. With ``extend`` the last active mode fills
        any part of [a, b] past this schedule's horizon."""
        if not a < b:
            raise ValueError("empty restriction window")
        if a < self.t0 - 1e-12 or (not extend and b > self.tM + 1e-12):
            raise ValueError("window extends outside the schedule horizon")
        eps = 1e-12 * max(1.0, abs(b))
        sigma, tau = [self.mode_at(min(a, self.tM))], []
        for s, T in zip(self.sigma[1:], self.tau):
            if T <= a + eps or T >= b - eps:
                continue
            if s == sigma[-1]:
                continue
            sigma.append(s)
            tau.append(T)
        return ModeSchedule(tuple(sigma), tuple(tau), a, b).normalized()


@dataclass(frozen=True)
class SwitchingControl:
    """Feasible switching control sampled on a time grid.

    At every grid time exactly one mode is active; ``active`` stores the
    1-based index and ``values`` exposes the equivalent 0/1 indicator rows.
    The control is piecewise constant from the left: u(t) equals the value
    at the largest grid point <= t.
    """

    grid: np.ndarray
    active: np.ndarray
    N: int

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        active = np.asarray(self.active, dtype=int)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing with >= 2 points")
        if active.shape != grid.shape:
            raise ValueError("one active mode per grid point required")
        if np.any(active < 1) or np.any(active > self.N):
            raise ValueError(f"active modes must lie in 1..{self.N}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "active", active)

    @classmethod
    def from_values(cls, grid, values, N=None) -> "SwitchingControl":
        """Build from 0/1 rows; rejects rows without exactly one active mode."""
        values = np.asarray(values)
        if N is None:
            N = values.shape[1]
        ones = np.sum(values != 0, axis=1)
        if np.any(ones != 1) or not np.all(np.isin(values, (0, 1))):
            bad = int(np.argmax(ones != 1))
            raise ValueError(
                f"sample {bad} has {int(ones[bad])} active modes; exactly one required"
            )
        return cls(grid=np.asarray(grid, dtype=float), active=np.argmax(values, axis=1) + 1, N=N)

    @classmethod
    def constant(cls, grid, mode: int, N: int) -> "SwitchingControl":
        grid = np.asarray(grid, dtype=float)
        return cls(grid=grid, active=np.full(grid.shape, mode, dtype=int), N=N)

    @property
    def values(self) -> np.ndarray:
        out = np.zeros((self.grid.size, self.N))
        out[np.arange(self.grid.size), self.active - 1] = 1.0
        return out

    @property
    def t0(self) -> float:
        return float(self.grid[0])

    @property
    def tM(self) -> float:
        return float(self.grid[-1])


@dataclass(frozen=True)
class RealControl:
    """Unconstrained real-valued control samples, one length-N row per grid
    time; the input to the max projection."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite")
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=float))
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class QuadraticCost:
    """Running cost integrand x'Q(t)x/2 plus terminal cost x'P1x/2 over
    [t0, tM]. Q(t) and P1 must be symmetric positive semidefinite."""

    Q: tuple  # n x n of TimeExpr
    P1: np.ndarray
    t0: float
    tM: float

    @classmethod
    def from_entries(cls, Q, P1, t0: float, tM: float) -> "QuadraticCost":
        n = len(Q)
        Qmat = _expr_matrix(Q, n)
        P1 = np.asarray(P1, dtype=float)
        if P1.shape != (n, n):
            raise ValueError(f"P1 must be {n}x{n}")
        if not np.allclose(P1, P1.T, atol=1e-12):
            raise ValueError("P1 must be symmetric")
        if np.min(np.linalg.eigvalsh(P1)) < -1e-10:
            raise ValueError("P1 must be positive semidefinite")
        cost = cls(Q=Qmat, P1=P1, t0=float(t0), tM=float(tM))
        for t in np.linspace(t0, tM, 7):
            Qt = cost.q_matrix(t)
            if not np.allclose(Qt, Qt.T, atol=1e-9):
                raise ValueError(f"Q({t}) is not symmetric")
            if np.min(np.linalg.eigvalsh(0.5 * (Qt + Qt.T))) < -1e-9:
                raise ValueError(f"Q({t}) is not positive semidefinite")
        return cost

    @property
    def n(self) -> int:
        return len(self.Q)

    def q_matrix(self, t):
        """Q evaluated at scalar t -> (n,n) or at an array -> (T,n,n)."""
        return eval_expr_matrix(self.Q, t)


def uniform_grid(t0: float, tM: float, spacing: float) -> np.ndarray:
    """Uniform sample times over [t0, tM] with approximately the requested
    spacing; endpoints are exact."""
    if not tM > t0:
        raise ValueError("empty horizon")
    cells = max(1, int(round((tM - t0) / spacing)))
    return np.linspace(t0, tM, cells + 1)


def schedule_from_control(u: SwitchingControl) -> ModeSchedule:
    """Extract the normalized mode schedule; switching times are the grid
    times where the active index changes. A change at the final sample would
    make a zero-length segment and is dropped."""
    change = np.flatnonzero(np.diff(u.active)) + 1
    change = change[change < u.grid.size - 1]
    sigma = tuple(int(m) for m in u.active[np.concatenate(([0], change))])
    tau = tuple(float(t) for t in u.grid[change])
    return ModeSchedule(sigma, tau, u.t0, u.tM).normalized()


def control_from_schedule(s: ModeSchedule, grid, N: int | None = None) -> SwitchingControl:
    """Sample a schedule onto a grid; each sample takes the mode of the
    half-open segment containing it and t = tM takes the final mode."""
    grid = np.asarray(grid, dtype=float)
    if grid[0] < s.t0 - 1e-12 or grid[-1] > s.tM + 1e-12:
        raise ValueError("grid extends outside the schedule horizon")
    if N is None:
        N = max(s.sigma)
    return SwitchingControl(grid=grid, active=np.asarray(s.mode_at(grid), dtype=int), N=N)
