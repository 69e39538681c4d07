"""Independent reference implementations used to freeze expected values.

Everything here is deliberately naive (plain loops, no shared code with the
package's integration or evaluation paths) so test expectations stay
independent of the machinery they check.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm


def rk4(f, y0, t0, t1, steps):
    """Classical fixed-step RK4 for y' = f(t, y); returns the final value."""
    y = np.array(y0, dtype=float)
    h = (t1 - t0) / steps
    t = t0
    for _ in range(steps):
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        t += h
    return y


def propagate_switched(system, schedule, x0, step=1e-4):
    """Fixed-step RK4 through a mode schedule, splitting exactly at each
    switching time. Returns the state at the end of the horizon."""
    x = np.array(x0, dtype=float)
    bounds = [schedule.t0, *schedule.tau, schedule.tM]
    for s in range(len(schedule.sigma)):
        a, b = bounds[s], bounds[s + 1]
        j = schedule.sigma[s]
        f = lambda t, y: system.mode_matrix(j, float(t)) @ y
        steps = max(1, int(np.ceil((b - a) / step)))
        x = rk4(f, x, a, b, steps)
    return x


def state_at(system, schedule, x0, t, step=1e-4):
    """State at an interior time via naive switched propagation."""
    if t <= schedule.t0:
        return np.array(x0, dtype=float)
    sub = schedule.restrict(schedule.t0, t) if t < schedule.tM else schedule
    if t < schedule.tM:
        return propagate_switched(system, sub, x0, step)
    return propagate_switched(system, schedule, x0, step)


def stm_by_integration(system, j, s, t, step=1e-4):
    """Transition matrix of mode j from time s to time t by direct matrix
    RK4 (works for either time ordering)."""
    n = system.n
    f = lambda tt, y: system.mode_matrix(j, float(tt)) @ y
    steps = max(1, int(np.ceil(abs(t - s) / step)))
    cols = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        cols.append(rk4(f, e, s, t, steps))
    return np.column_stack(cols)


def riccati_factor_by_integration(system, schedule, Q_fn, P1, t, step=1e-4):
    """P(t) by naive backward integration of the switched Lyapunov equation
    dP/dt = -A'P - P A - Q from P(tM) = P1, one segment at a time so every
    RK4 stage uses the matrix of the segment it integrates through."""
    n = system.n

    def make_f(j):
        def f(tt, p):
            P = p.reshape(n, n)
            A = system.mode_matrix(j, float(tt))
            return (-A.T @ P - P @ A - Q_fn(float(tt))).reshape(-1)

        return f

    bounds = [schedule.t0, *schedule.tau, schedule.tM]
    p = np.asarray(P1, dtype=float).reshape(-1)
    for s in range(len(schedule.sigma) - 1, -1, -1):
        a, b = max(bounds[s], t), bounds[s + 1]
        if b <= t:
            break
        steps = max(1, int(np.ceil((b - a) / step)))
        p = rk4(make_f(schedule.sigma[s]), p, b, a, steps)
        if a == t:
            break
    return p.reshape(n, n)


def cost_by_integration(system, schedule, x0, Q_fn, P1, step=1e-4):
    """Quadratic cost by integrating the running term as an augmented state
    along the exact switched trajectory (splits at switching times)."""
    n = np.asarray(x0).size

    def make_f(j):
        def f(t, y):
            A = system.mode_matrix(j, float(t))
            x = y[:n]
            dx = A @ x
            dz = 0.5 * x @ Q_fn(float(t)) @ x
            return np.concatenate([dx, [dz]])

        return f

    y = np.concatenate([np.asarray(x0, dtype=float), [0.0]])
    bounds = [schedule.t0, *schedule.tau, schedule.tM]
    for s in range(len(schedule.sigma)):
        a, b = bounds[s], bounds[s + 1]
        steps = max(1, int(np.ceil((b - a) / step)))
        y = rk4(make_f(schedule.sigma[s]), y, a, b, steps)
    x_end = y[:n]
    return float(y[n] + 0.5 * x_end @ np.asarray(P1) @ x_end)


def damped_oscillator(k, d, m, x0, v0, t):
    """Closed-form solution of m q'' + d q' + k q = 0 (underdamped case)."""
    wn = np.sqrt(k / m)
    zeta = d / (2 * np.sqrt(k * m))
    assert zeta < 1, "closed form below covers the underdamped case only"
    wd = wn * np.sqrt(1 - zeta * zeta)
    a = zeta * wn
    t = np.asarray(t, dtype=float)
    c1 = x0
    c2 = (v0 + a * x0) / wd
    q = np.exp(-a * t) * (c1 * np.cos(wd * t) + c2 * np.sin(wd * t))
    qdot = np.exp(-a * t) * (
        (-a * c1 + c2 * wd) * np.cos(wd * t) + (-a * c2 - c1 * wd) * np.sin(wd * t)
    )
    return q, qdot


def expm_oracle(A, dt):
    return expm(np.asarray(A, dtype=float) * dt)
