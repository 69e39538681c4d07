"""Comparison optimizers that integrate the state and co-state online, plus
the benchmark harness contrasting them with the table-driven solver.

The two baselines run the same projected-descent loop but approximate x and
rho every iteration with fixed-step Forward Euler or Improved Euler (two
stage Runge-Kutta) recursions on an N-sample grid, so their per-iteration
work and their accuracy both scale with the sample count; switching times
are limited to the sample grid.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ._integrate import METER
from .errors import NumericalError
from .model import (
    ModeSchedule,
    QuadraticCost,
    SwitchedLinearSystem,
    SwitchingControl,
    schedule_from_control,
)
from .optimizer import SiomsParams, solve
from .transition import build_tables

FORWARD_EULER = "FwdEuler"
IMPROVED_EULER = "ImpEuler"
TABLE_METHOD = "SIOMS"


def _sample_grid(t0: float, tM: float, n_samples: int) -> np.ndarray:
    if n_samples < 2:
        raise ValueError("need at least two samples")
    return np.linspace(t0, tM, n_samples)


def _step_matrices(sys: SwitchedLinearSystem, schedule: ModeSchedule,
                   times: np.ndarray):
    """Active-mode matrices at both endpoints of each step.

    Each step [t_h, t_{h+1}] belongs to the schedule segment owning its
    interior, so a sample that sits exactly on a switching time is resolved
    to that owner at both stage evaluations (mixing two modes inside one
    step would degrade the recursions to first order at every switch).
    """
    mid = 0.5 * (times[:-1] + times[1:])
    owner = np.asarray(schedule.mode_at(np.minimum(mid, schedule.tM)))
    A_lo = np.empty((times.size - 1, sys.n, sys.n))
    A_hi = np.empty_like(A_lo)
    for j in np.unique(owner):
        mask = owner == j
        A_lo[mask] = sys.mode_matrix(int(j), times[:-1][mask])
        A_hi[mask] = sys.mode_matrix(int(j), times[1:][mask])
    return A_lo, A_hi


def euler_forward_pass(sys: SwitchedLinearSystem, cost: QuadraticCost,
                       schedule: ModeSchedule, n_samples: int,
                       x0: np.ndarray | None = None):
    """Forward-Euler approximation of the state and co-state on an N-sample
    grid (N points including both endpoints).

    Forward recursion x(t_{h+1}) = (I + dt A(t_h)) x(t_h); backward
    recursion for rho driven by A(t_{h+1}) and Q(t_{h+1}) from the terminal
    condition rho = P1 x(t_N).
    """
    times = _sample_grid(schedule.t0, schedule.tM, n_samples)
    dt = times[1] - times[0]
    A_lo, A_hi = _step_matrices(sys, schedule, times)
    Q = cost.q_matrix(times)
    eye = np.eye(sys.n)
    x0 = sys.x0 if x0 is None else np.asarray(x0, float)

    x = np.empty((n_samples, sys.n))
    x[0] = x0
    step = eye + dt * A_lo
    bwd = eye + dt * A_hi
    with np.errstate(over="ignore", invalid="ignore"):
        for h in range(n_samples - 1):
            x[h + 1] = step[h] @ x[h]
        rho = np.empty_like(x)
        rho[-1] = np.asarray(cost.P1) @ x[-1]
        for h in range(n_samples - 2, -1, -1):
            rho[h] = bwd[h].T @ rho[h + 1] + dt * (Q[h + 1] @ x[h + 1])
    METER.add(2 * (n_samples - 1))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(rho))):
        raise NumericalError("Forward Euler diverged (unstable step size)")
    return times, x, rho


def euler_improved_pass(sys: SwitchedLinearSystem, cost: QuadraticCost,
                        schedule: ModeSchedule, n_samples: int,
                        x0: np.ndarray | None = None):
    """Improved-Euler (two-stage Runge-Kutta) approximation of the state and
    co-state on an N-sample grid."""
    times = _sample_grid(schedule.t0, schedule.tM, n_samples)
    dt = times[1] - times[0]
    A_lo, A_hi = _step_matrices(sys, schedule, times)
    Q = cost.q_matrix(times)
    eye = np.eye(sys.n)
    x0 = sys.x0 if x0 is None else np.asarray(x0, float)

    x = np.empty((n_samples, sys.n))
    x[0] = x0
    fwd = eye + 0.5 * dt * A_lo + 0.5 * dt * A_hi @ (eye + dt * A_lo)
    At_lo = np.swapaxes(A_lo, -1, -2)
    At_hi = np.swapaxes(A_hi, -1, -2)
    bwd = eye + 0.5 * dt * At_hi + 0.5 * dt * At_lo @ (eye + dt * At_hi)
    src = dt * (eye + 0.5 * dt * At_lo) @ Q[1:]
    with np.errstate(over="ignore", invalid="ignore"):
        for h in range(n_samples - 1):
            x[h + 1] = fwd[h] @ x[h]
        rho = np.empty_like(x)
        rho[-1] = np.asarray(cost.P1) @ x[-1]
        for h in range(n_samples - 2, -1, -1):
            rho[h] = bwd[h] @ rho[h + 1] + src[h] @ x[h + 1]
    METER.add(2 * (n_samples - 1))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(rho))):
        raise NumericalError("Improved Euler diverged (unstable step size)")
    return times, x, rho


_PASSES = {FORWARD_EULER: euler_forward_pass, IMPROVED_EULER: euler_improved_pass}


def _euler_cost(cost: QuadraticCost, times: np.ndarray, x: np.ndarray) -> float:
    Q = cost.q_matrix(times)
    integrand = 0.5 * np.einsum("ti,tij,tj->t", x, Q, x)
    return float(np.trapezoid(integrand, times)) + 0.5 * float(
        x[-1] @ np.asarray(cost.P1) @ x[-1])


def euler_solve(sys: SwitchedLinearSystem, cost: QuadraticCost,
                u0_mode: int, n_samples: int, method: str,
                params: SiomsParams | None = None,
                x0: np.ndarray | None = None):
    """Projected-descent mode scheduling with online Euler integration.

    Same loop shape as the table-driven solver, but every iteration (and
    every line-search trial) re-simulates the state and co-state, and
    switching times live on the N-sample grid.
    """
    params = params or SiomsParams()
    run_pass = _PASSES[method]
    times = _sample_grid(cost.t0, cost.tM, n_samples)
    cell = times[1] - times[0]
    u = SwitchingControl.constant(times, u0_mode, sys.N)
    schedule = schedule_from_control(u)
    history = []
    J = None
    accepted = 0
    termination = "max_iter"
    theta_tol = params.theta_tol
    gamma0 = params.gamma0
    x = rho = None

    for k in range(max(1, params.max_iter + 1)):
        _, x, rho = run_pass(sys, cost, schedule, n_samples, x0=x0)
        if J is None:
            J = _euler_cost(cost, times, x)
        active = np.asarray(schedule.mode_at(times))
        d = np.empty((n_samples, sys.N))
        z = np.empty((n_samples, sys.N))
        for i in range(1, sys.N + 1):
            A = sys.mode_matrix(i, times)
            z[:, i - 1] = np.einsum("ti,tij,tj->t", rho, A, x)
        d[:] = z - z[np.arange(n_samples), active - 1][:, None]
        d[np.arange(n_samples), active - 1] = 0.0
        theta = float(np.min(d))

        if theta_tol is None:
            theta_tol = 1e-3 * abs(theta)
        if gamma0 is None:
            gamma0 = min(10.0 / abs(theta), 100.0) if theta != 0.0 else 1.0
        history.append({"k": k, "J": float(J), "theta": theta})
        if abs(theta) <= theta_tol:
            termination = "theta_tol"
            break
        if k == params.max_iter:
            break

        onehot = u.values
        accepted_step = None
        gamma_hi = gamma_lo = None
        trials = 0

        def try_gamma(gamma):
            nonlocal trials
            mu = onehot - gamma * d
            act = np.argmax(mu, axis=1) + 1
            tu = SwitchingControl(grid=times, active=act, N=sys.N)
            tsched = schedule_from_control(tu)
            trials += 1
            if tsched == schedule:
                return None
            changed = act != u.active
            predicted = cell * float(np.sum(d[changed, act[changed] - 1]))
            _, xt, _ = run_pass(sys, cost, tsched, n_samples, x0=x0)
            Jt = _euler_cost(cost, times, xt)
            return (Jt <= J + params.c_armijo * predicted), tu, tsched, Jt

        for m in range(params.m_max + 1):
            gamma = gamma0 * params.beta ** m
            res = try_gamma(gamma)
            if res is None:
                gamma_lo = gamma
                break
            ok, tu, tsched, Jt = res
            if ok:
                accepted_step = (tu, tsched, Jt)
                break
            gamma_hi = gamma
        if accepted_step is None and gamma_hi is not None and gamma_lo is not None:
            for _ in range(params.bisect_trials):
                if gamma_hi / gamma_lo < 1.0 + 1e-4:
                    break
                res = try_gamma(float(np.sqrt(gamma_lo * gamma_hi)))
                if res is None:
                    gamma_lo = float(np.sqrt(gamma_lo * gamma_hi))
                    continue
                ok, tu, tsched, Jt = res
                if ok:
                    accepted_step = (tu, tsched, Jt)
                    break
                gamma_hi = float(np.sqrt(gamma_lo * gamma_hi))
        if accepted_step is None:
            termination = "backtrack_failure"
            break
        u, schedule, J = accepted_step
        accepted += 1

    return {
        "times": times,
        "x": x,
        "rho": rho,
        "schedule": schedule,
        "J": float(history[-1]["J"]),
        "history": history,
        "accepted": accepted,
        "termination": termination,
    }


def analytic_states(sys: SwitchedLinearSystem, schedule: ModeSchedule,
                    x0: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Exact switched solution for time-invariant modes: per-segment matrix
    exponentials evaluated at the sample times."""
    for j in range(1, sys.N + 1):
        if not all(e.is_constant for row in sys.modes[j - 1] for e in row):
            raise ValueError("analytic solution requires time-invariant modes")
    times = np.asarray(times, dtype=float)
    out = np.empty((times.size, sys.n))
    b = schedule.boundaries
    x_seg = np.asarray(x0, float)
    idx = 0
    for s in range(schedule.M):
        A = sys.mode_matrix(schedule.sigma[s], 0.0)
        hi = times.size if s == schedule.M - 1 else int(np.searchsorted(times, b[s + 1]))
        seg_times = times[idx:hi]
        if seg_times.size:
            if seg_times.size > 1 and np.allclose(np.diff(seg_times), seg_times[1] - seg_times[0]):
                E_step = expm(A * (seg_times[1] - seg_times[0]))
                x = expm(A * (seg_times[0] - b[s])) @ x_seg
                for r in range(seg_times.size):
                    out[idx + r] = x
                    if r < seg_times.size - 1:
                        x = E_step @ x
            else:
                for r, t in enumerate(seg_times):
                    out[idx + r] = expm(A * (t - b[s])) @ x_seg
        x_seg = expm(A * (b[s + 1] - b[s])) @ x_seg
        idx = hi
    return out


def rms_state_error(computed: np.ndarray, exact: np.ndarray) -> float:
    """Per-state RMS over the sample points, then the 2-norm across states."""
    per_state = np.sqrt(np.mean((computed - exact) ** 2, axis=0))
    return float(np.linalg.norm(per_state))


@dataclass
class BenchCell:
    method: str
    n_samples: int
    seconds: float
    rms_error: float
    final_cost: float
    build_seconds: float = 0.0
    diverged: bool = False


@dataclass
class BenchResult:
    cells: list[BenchCell] = field(default_factory=list)

    def by_method(self, method: str) -> list[BenchCell]:
        return [c for c in self.cells if c.method == method and not c.diverged]

    def to_rows(self) -> list[dict]:
        return [
            {"method": c.method, "N": c.n_samples, "seconds": c.seconds,
             "rms_error": c.rms_error, "final_cost": c.final_cost,
             "build_seconds": c.build_seconds, "diverged": c.diverged}
            for c in self.cells
        ]


def _true_cost(sys, cost, schedule, x0, points: int = 20001) -> float:
    """Cost of a schedule measured on the analytic solution with a fine
    Simpson rule (independent of any method's own estimate)."""
    k = points if points % 2 == 1 else points + 1
    times = np.linspace(schedule.t0, schedule.tM, k)
    x = analytic_states(sys, schedule, x0, times)
    Q = cost.q_matrix(times)
    integrand = 0.5 * np.einsum("ti,tij,tj->t", x, Q, x)
    w = np.ones(k)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    J = float(w @ integrand) * (times[1] - times[0]) / 3.0
    return J + 0.5 * float(x[-1] @ np.asarray(cost.P1) @ x[-1])


def bench(scenario, n_list=(100, 400, 1600, 6400, 20001), iterations: int = 10,
          repeats: int = 5, methods=(TABLE_METHOD, FORWARD_EULER, IMPROVED_EULER)) -> BenchResult:
    """Time/error study across sample counts for all three methods.

    Online wall time is the median over ``repeats`` runs of ``iterations``
    optimizer iterations. The table method's offline build is timed
    separately; its integration step stays fine regardless of the sample
    count, which only sets the stored table resolution.
    """
    sys_ = scenario.system
    cost = scenario.cost
    params = SiomsParams(max_iter=iterations)
    result = BenchResult()
    horizon = cost.tM - cost.t0

    for n in n_list:
        sample_times = _sample_grid(cost.t0, cost.tM, n)
        if TABLE_METHOD in methods:
            t_build0 = time.perf_counter()
            tables = build_tables(sys_, cost, cost.t0, cost.tM,
                                  spacing=horizon / (n - 1),
                                  fine_step=scenario.tables.fine_step)
            build_seconds = time.perf_counter() - t_build0
            from .model import uniform_grid

            grid = uniform_grid(cost.t0, cost.tM, scenario.control_spacing)
            u0 = SwitchingControl.constant(grid, scenario.u0_mode, sys_.N)
            wall = []
            report = None
            for _ in range(repeats):
                t0 = time.perf_counter()
                report = solve(sys_, cost, u0, params, tables=tables)
                wall.append(time.perf_counter() - t0)
            xs = np.empty((n, sys_.n))
            from .optimizer import precompute_switch_points, _states_at

            sp = precompute_switch_points(tables, report.final_schedule, sys_.x0,
                                          np.asarray(cost.P1))
            xs = _states_at(tables, sp, sample_times)
            exact = analytic_states(sys_, report.final_schedule, sys_.x0, sample_times)
            result.cells.append(BenchCell(
                method=TABLE_METHOD, n_samples=n,
                seconds=float(np.median(wall)),
                rms_error=rms_state_error(xs, exact),
                final_cost=_true_cost(sys_, cost, report.final_schedule, sys_.x0),
                build_seconds=build_seconds,
            ))
        for method in methods:
            if method == TABLE_METHOD:
                continue
            try:
                wall = []
                out = None
                for _ in range(repeats):
                    t0 = time.perf_counter()
                    out = euler_solve(sys_, cost, scenario.u0_mode, n, method, params)
                    wall.append(time.perf_counter() - t0)
                exact = analytic_states(sys_, out["schedule"], sys_.x0, out["times"])
                result.cells.append(BenchCell(
                    method=method, n_samples=n,
                    seconds=float(np.median(wall)),
                    rms_error=rms_state_error(out["x"], exact),
                    final_cost=_true_cost(sys_, cost, out["schedule"], sys_.x0),
                ))
            except NumericalError:
                result.cells.append(BenchCell(
                    method=method, n_samples=n, seconds=float("nan"),
                    rms_error=float("nan"), final_cost=float("nan"), diverged=True,
                ))
    return result
