"""Fixed-step 4th-order integration kernels for linear time-varying systems.

Everything here is batched: one-step transition matrices are formed for many
steps (or many chunks) at once with stacked matmuls, so the sequential part
of an integration is reduced to cheap small-matrix recurrences.

All integration work flows through the module-level ``METER`` so callers can
assert where integration happens (and, during iterative optimization, that
none does).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


@dataclass
class IntegrationMeter:
    """Instrumented counter of integration work.

    ``calls`` counts invocations of an integration routine; ``steps`` counts
    individual fixed-size integrator steps (per mode / per system).
    """

    calls: int = 0
    steps: int = 0

    def add(self, steps: int) -> None:
        self.calls += 1
        self.steps += int(steps)

    def snapshot(self) -> tuple[int, int]:
        return (self.calls, self.steps)

    def reset(self) -> None:
        self.calls = 0
        self.steps = 0


METER = IntegrationMeter()


def rk4_step_matrices(A0: np.ndarray, Am: np.ndarray, A1: np.ndarray, h: float) -> np.ndarray:
    """One-step transition matrices M with x(t+h) = M x(t) for x' = A(t)x.

    A0, Am, A1 are A evaluated at t, t + h/2 and t + h; all arguments may be
    batched over leading dimensions. ``h`` may be negative for backward steps.
    """
    n = A0.shape[-1]
    eye = np.eye(n)
    k1 = A0
    k2 = Am @ (eye + (h / 2.0) * k1)
    k3 = Am @ (eye + (h / 2.0) * k2)
    k4 = A1 @ (eye + h * k3)
    return eye + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def substep_count(width: float, fine_step: float) -> int:
    return max(1, int(np.ceil(width / fine_step - 1e-12)))


def chunk_stms(mode_eval, grid: np.ndarray, fine_step: float) -> np.ndarray:
    """Transition matrices across each cell of a uniform grid.

    ``mode_eval(times)`` must return A stacked as (T, n, n). Returns
    (G, n, n) with entry g equal to the transition matrix from grid[g] to
    grid[g+1], each cell integrated with ceil(cell/fine_step) RK4 substeps.
    """
    grid = np.asarray(grid, dtype=float)
    G = grid.size - 1
    width = grid[1] - grid[0]
    m = substep_count(width, fine_step)
    h = width / m
    starts = grid[:-1]
    A_right = mode_eval(starts)
    n = A_right.shape[-1]
    phi = np.broadcast_to(np.eye(n), (G, n, n)).copy()
    for s in range(m):
        t = starts + s * h
        A0 = A_right
        Am = mode_eval(t + h / 2.0)
        A_right = mode_eval(t + h)
        phi = rk4_step_matrices(A0, Am, A_right, h) @ phi
    METER.add(G * m)
    if not np.all(np.isfinite(phi)):
        raise NumericalError("transition-matrix integration produced non-finite values")
    return phi


def chunk_atms(mode_eval, q_eval, grid: np.ndarray, fine_step: float) -> np.ndarray:
    """Per-cell adjoint-transition matrices on a uniform grid.

    Integrates S' = -A(t)'S - S A(t) - Q(t) backward across each cell from a
    zero terminal value at the cell's right edge. Returns (G, n, n) where
    entry g is the adjoint-transition matrix from grid[g] to grid[g+1].
    """
    grid = np.asarray(grid, dtype=float)
    G = grid.size - 1
    width = grid[1] - grid[0]
    m = substep_count(width, fine_step)
    h = width / m
    rights = grid[1:]

    def f(A, Q, S):
        return -np.swapaxes(A, -1, -2) @ S - S @ A - Q

    A_hi = mode_eval(rights)
    Q_hi = q_eval(rights)
    n = A_hi.shape[-1]
    S = np.zeros((G, n, n))
    for s in range(m):
        t = rights - s * h
        A0, Q0 = A_hi, Q_hi
        tm = t - h / 2.0
        Am, Qm = mode_eval(tm), q_eval(tm)
        A_hi, Q_hi = mode_eval(t - h), q_eval(t - h)
        k1 = f(A0, Q0, S)
        k2 = f(Am, Qm, S - (h / 2.0) * k1)
        k3 = f(Am, Qm, S - (h / 2.0) * k2)
        k4 = f(A_hi, Q_hi, S - h * k3)
        S = S - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    METER.add(G * m)
    if not np.all(np.isfinite(S)):
        raise NumericalError("adjoint-transition integration produced non-finite values")
    return 0.5 * (S + np.swapaxes(S, -1, -2))


def propagate_linear(mode_eval, x0: np.ndarray, t_from: float, t_to: float,
                     fine_step: float) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-step RK4 propagation of x' = A(t)x over [t_from, t_to].

    Returns (times, states) including both endpoints, sampled at every
    internal step.
    """
    steps = substep_count(t_to - t_from, fine_step)
    h = (t_to - t_from) / steps
    times = t_from + h * np.arange(steps + 1)
    times[-1] = t_to
    starts = times[:-1]
    A0 = mode_eval(starts)
    Am = mode_eval(starts + h / 2.0)
    A1 = mode_eval(starts + h)
    M = rk4_step_matrices(A0, Am, A1, h)
    out = np.empty((steps + 1, x0.size))
    out[0] = x0
    x = x0
    for k in range(steps):
        x = M[k] @ x
        out[k + 1] = x
    METER.add(steps)
    if not np.all(np.isfinite(out)):
        raise NumericalError("state propagation diverged (non-finite state)")
    return times, out
