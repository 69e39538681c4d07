"""Open-loop mode scheduling by projected descent on the switching control.

Each iteration evaluates the state and the quadratic cost-to-go factor
purely from the offline transition tables (no ODE solves), forms the mode
insertion gradient, and takes a backtracking step through the max
projection. The per-iteration multiplication counter follows the standard
accounting for this family of methods: 4(M-1) for the switch-point
recursions plus 9 per insertion-gradient evaluation time.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from ._integrate import METER
from .errors import NumericalError
from .model import (
    ModeSchedule,
    QuadraticCost,
    RealControl,
    SwitchedLinearSystem,
    SwitchingControl,
    schedule_from_control,
)
from .transition import TransitionTables, build_tables

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class MultCounter:
    """Matrix-multiplication counter under the complexity accounting used
    throughout: a state evaluation costs 2, a cost-to-go evaluation 4, and a
    full insertion-gradient evaluation 9 (including the state and cost-to-go
    shares)."""

    count: int = 0

    def add(self, k: int) -> None:
        self.count += int(k)


@dataclass(frozen=True)
class SiomsParams:
    """Iteration parameters for the open-loop solver.

    ``gamma0`` and ``theta_tol`` default to values derived from the first
    optimality measure: gamma0 = min(10/|theta0|, 100) and
    theta_tol = 1e-3 |theta0|.
    """

    max_iter: int = 30
    theta_tol: float | None = None
    gamma0: float | None = None
    beta: float = 0.85
    c_armijo: float = 0.1
    m_max: int = 40
    bisect_trials: int = 12
    lambda_eval: int = 200
    refine_steps: int = 16
    quad_points: int = 1001
    quadrature: str = "simpson"

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if self.gamma0 is not None and self.gamma0 <= 0:
            raise ValueError("gamma0 must be positive")
        if self.lambda_eval < 2:
            raise ValueError("lambda_eval must be at least 2")
        if self.quadrature != "simpson":
            raise ValueError("unknown quadrature rule")


@dataclass(frozen=True)
class SwitchPoints:
    """State and cost-to-go factors at segment boundaries, plus cached
    per-segment transition products.

    When no mode needed interior re-anchoring, ``inv_states`` and
    ``end_mats`` hold the precomposed per-segment factors that let later
    state/co-state queries run one interpolation per mode instead of one
    table query per segment.
    """

    schedule: ModeSchedule
    states: np.ndarray  # (M, n): x at segment starts b[0..M-1]
    P: np.ndarray  # (M, n, n): cost-to-go factor at b[1..M]
    seg_mats: np.ndarray  # (M, n, n): transition across each segment
    s_mats: np.ndarray  # (M, n, n): P(b[s+1]) - psi(b[s+1]) per segment
    x_terminal: np.ndarray  # x at tM
    inv_states: np.ndarray | None = None  # (M, n): phi(b[s])^-1 x(b[s])
    end_mats: np.ndarray | None = None  # (M, n, n): phi(b[s+1], t0)


def precompute_switch_points(tables: TransitionTables, schedule: ModeSchedule,
                             x0: np.ndarray, P1: np.ndarray,
                             counter: MultCounter | None = None) -> SwitchPoints:
    """Forward state recursion and backward cost-to-go recursion over the
    switch times. Counts 4(M-1) multiplications."""
    b = schedule.boundaries
    M = schedule.M
    n = x0.size
    sig = np.asarray(schedule.sigma)
    factors = {j: tables.stm_factors(int(j)) for j in np.unique(sig)}
    fast = all(f is not None for f in factors.values())

    seg_mats = np.empty((M, n, n))
    psi_start = np.empty((M, n, n))
    psi_end = np.empty((M, n, n))
    phi_start_inv = np.empty((M, n, n)) if fast else None
    phi_end = np.empty((M, n, n)) if fast else None
    for j in np.unique(sig):
        mask = sig == j
        starts, ends = b[:-1][mask], b[1:][mask]
        both = np.concatenate([starts, ends])
        psi_both = tables.atm_at(int(j), both)
        k = starts.size
        psi_start[mask] = psi_both[:k]
        psi_end[mask] = psi_both[k:]
        if fast:
            interp_phi, interp_inv = factors[int(j)]
            inv_s = interp_inv(starts)
            phi_e = interp_phi(ends)
            phi_start_inv[mask] = inv_s
            phi_end[mask] = phi_e
            seg_mats[mask] = phi_e @ inv_s
        else:
            tables._check_range(b[0], b[-1])
            for s in np.flatnonzero(mask):
                seg_mats[s] = tables.stm_between(int(j), b[s + 1], b[s])

    states = np.empty((M, n))
    states[0] = x0
    for s in range(M - 1):
        states[s + 1] = seg_mats[s] @ states[s]
    x_terminal = seg_mats[M - 1] @ states[M - 1]

    P = np.empty((M, n, n))
    P[M - 1] = P1
    for s in range(M - 1, 0, -1):
        P[s - 1] = psi_start[s] + seg_mats[s].T @ (P[s] - psi_end[s]) @ seg_mats[s]
    s_mats = P - psi_end

    inv_states = None
    end_mats = None
    if fast:
        inv_states = np.einsum("sij,sj->si", phi_start_inv, states)
        end_mats = phi_end
    if counter is not None:
        counter.add(4 * (M - 1))
    return SwitchPoints(schedule=schedule, states=states, P=P,
                        seg_mats=seg_mats, s_mats=s_mats, x_terminal=x_terminal,
                        inv_states=inv_states, end_mats=end_mats)


def _states_at(tables: TransitionTables, sp: SwitchPoints, times) -> np.ndarray:
    """x(t) from the segment-wise transition algebra; vectorized, uncounted."""
    sched = sp.schedule
    times = np.atleast_1d(np.asarray(times, dtype=float))
    tables._check_range(times)
    seg = np.asarray(sched.segment_index(times))
    b = sched.boundaries
    out = np.empty((times.size, sp.states.shape[1]))
    sig = np.asarray(sched.sigma)
    if sp.inv_states is not None:
        for j in np.unique(sig[np.unique(seg)]):
            mask = sig[seg] == j
            phi = tables.stm_factors(int(j))[0](times[mask])
            out[mask] = np.einsum("tij,tj->ti", phi, sp.inv_states[seg[mask]])
        return out
    for s in np.unique(seg):
        mask = seg == s
        phi = tables.stm_between(sched.sigma[s], times[mask], b[s])
        out[mask] = phi @ sp.states[s]
    return out


def _costate_factors_at(tables: TransitionTables, sp: SwitchPoints, times) -> np.ndarray:
    """P(t) from the segment-wise adjoint algebra; vectorized, uncounted."""
    sched = sp.schedule
    times = np.atleast_1d(np.asarray(times, dtype=float))
    tables._check_range(times)
    seg = np.asarray(sched.segment_index(times))
    b = sched.boundaries
    n = sp.states.shape[1]
    out = np.empty((times.size, n, n))
    at_end = times == sched.tM
    sig = np.asarray(sched.sigma)
    if sp.end_mats is not None:
        for j in np.unique(sig[np.unique(seg)]):
            mask = sig[seg] == j
            interp_phi, interp_inv = tables.stm_factors(int(j))
            psi = tables.atm_interp[int(j) - 1](times[mask])
            G = sp.end_mats[seg[mask]] @ interp_inv(times[mask])
            out[mask] = psi + np.swapaxes(G, -1, -2) @ sp.s_mats[seg[mask]] @ G
    else:
        for s in np.unique(seg):
            mask = seg == s
            j = sched.sigma[s]
            psi = tables.atm_at(j, times[mask])
            phi_end = tables.stm_between(j, b[s + 1], times[mask])
            out[mask] = psi + np.swapaxes(phi_end, -1, -2) @ sp.s_mats[s] @ phi_end
    if np.any(at_end):
        out[at_end] = sp.P[-1]
    return out


def eval_state(tables: TransitionTables, schedule_or_sp, t,
               x0: np.ndarray | None = None, P1: np.ndarray | None = None,
               counter: MultCounter | None = None) -> np.ndarray:
    """State at time t for the given schedule (2 multiplications per point)."""
    sp = _as_switch_points(tables, schedule_or_sp, x0, P1)
    t_arr = np.asarray(t, dtype=float)
    if counter is not None:
        counter.add(2 * max(1, t_arr.size))
    out = _states_at(tables, sp, t_arr)
    return out[0] if t_arr.ndim == 0 else out


def eval_costate_factor(tables: TransitionTables, schedule_or_sp, t,
                        x0: np.ndarray | None = None, P1: np.ndarray | None = None,
                        counter: MultCounter | None = None) -> np.ndarray:
    """Cost-to-go factor P(t) with rho(t) = P(t) x(t) (4 multiplications per
    point); P(tM) returns the terminal weight exactly."""
    sp = _as_switch_points(tables, schedule_or_sp, x0, P1)
    t_arr = np.asarray(t, dtype=float)
    if counter is not None:
        counter.add(4 * max(1, t_arr.size))
    out = _costate_factors_at(tables, sp, t_arr)
    return out[0] if t_arr.ndim == 0 else out


def _as_switch_points(tables, schedule_or_sp, x0, P1) -> SwitchPoints:
    if isinstance(schedule_or_sp, SwitchPoints):
        return schedule_or_sp
    if x0 is None or P1 is None:
        raise ValueError("x0 and P1 are required when passing a bare schedule")
    return precompute_switch_points(tables, schedule_or_sp, np.asarray(x0, float),
                                    np.asarray(P1, float))


def insertion_gradient(tables: TransitionTables, sys: SwitchedLinearSystem,
                       sp: SwitchPoints, t,
                       counter: MultCounter | None = None,
                       mode_cache: list | None = None) -> np.ndarray:
    """Mode insertion gradient d(t): first-order cost sensitivity to running
    mode i instead of the scheduled mode for an infinitesimal interval.

    The entry of the active mode is exactly zero. Counts 9 multiplications
    per evaluation time. ``mode_cache`` may hold the per-mode matrices
    already evaluated on exactly these times (they do not depend on the
    schedule, so one evaluation serves every iteration).
    """
    t_arr = np.asarray(t, dtype=float)
    times = np.atleast_1d(t_arr)
    if counter is not None:
        counter.add(9 * times.size)
    x = _states_at(tables, sp, times)  # (T, n)
    P = _costate_factors_at(tables, sp, times)  # (T, n, n)
    y = np.einsum("tij,tj->ti", P, x)
    active = np.asarray(sp.schedule.mode_at(times))
    d = np.empty((times.size, sys.N))
    yz = np.empty((times.size, sys.N))
    for i in range(1, sys.N + 1):
        A = mode_cache[i - 1] if mode_cache is not None else sys.mode_matrix(i, times)
        yz[:, i - 1] = np.einsum("ti,tij,tj->t", y, A, x)
    d[:] = yz - yz[np.arange(times.size), active - 1][:, None]
    d[np.arange(times.size), active - 1] = 0.0
    return d[0] if t_arr.ndim == 0 else d


def project(mu: RealControl) -> SwitchingControl:
    """Max projection onto feasible switching controls: the largest component
    wins at each sample, ties broken by lowest mode index."""
    active = np.argmax(mu.values, axis=1) + 1
    return SwitchingControl(grid=mu.grid, active=active, N=mu.values.shape[1])


def _simpson_weights(k: int, h: float) -> np.ndarray:
    if k % 2 == 0:
        raise ValueError("composite Simpson needs an odd sample count")
    w = np.ones(k)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (h / 3.0)


@dataclass
class _QuadCache:
    times: np.ndarray
    weights: np.ndarray
    q_samples: np.ndarray  # (K, n, n)
    P1: np.ndarray


def _make_quad_cache(cost: QuadraticCost, t0: float, tM: float, points: int) -> _QuadCache:
    k = points if points % 2 == 1 else points + 1
    times = np.linspace(t0, tM, k)
    weights = _simpson_weights(k, times[1] - times[0])
    return _QuadCache(times=times, weights=weights,
                      q_samples=cost.q_matrix(times), P1=np.asarray(cost.P1, float))


def schedule_cost(tables: TransitionTables, sp: SwitchPoints, quad: _QuadCache) -> float:
    """Quadratic cost of a schedule: Simpson quadrature of x'Qx/2 over the
    horizon plus the terminal term."""
    x = _states_at(tables, sp, quad.times)
    integrand = 0.5 * np.einsum("ti,tij,tj->t", x, quad.q_samples, x)
    running = float(quad.weights @ integrand)
    xT = sp.x_terminal
    return running + 0.5 * float(xT @ quad.P1 @ xT)


def cost_of_schedule(tables: TransitionTables, schedule: ModeSchedule,
                     cost: QuadraticCost, x0, quad_points: int = 1001) -> float:
    """Convenience wrapper building the switch points and quadrature cache."""
    sp = precompute_switch_points(tables, schedule, np.asarray(x0, float),
                                  np.asarray(cost.P1, float))
    quad = _make_quad_cache(cost, schedule.t0, schedule.tM, quad_points)
    return schedule_cost(tables, sp, quad)


def optimality_measure(d_samples: np.ndarray, times: np.ndarray,
                       tables: TransitionTables | None = None,
                       sys: SwitchedLinearSystem | None = None,
                       sp: SwitchPoints | None = None,
                       refine_steps: int = 0,
                       counter: MultCounter | None = None):
    """Most negative insertion-gradient value over the sampled (mode, time)
    grid, optionally sharpened by a golden-section search around the best
    sample. Returns (theta, mode, time, extra_evals)."""
    flat = int(np.argmin(d_samples))
    k, i = divmod(flat, d_samples.shape[1])
    theta = float(d_samples[k, i])
    t_best = float(times[k])
    extra = 0
    if refine_steps > 0 and tables is not None and theta < 0.0:
        lo = float(times[max(0, k - 1)])
        hi = float(times[min(times.size - 1, k + 1)])
        a, b = lo, hi
        c = b - GOLDEN * (b - a)
        dpt = a + GOLDEN * (b - a)
        fc = float(insertion_gradient(tables, sys, sp, c, counter)[i])
        fd = float(insertion_gradient(tables, sys, sp, dpt, counter)[i])
        extra += 2
        for _ in range(refine_steps):
            if fc <= fd:
                b, dpt, fd = dpt, c, fc
                c = b - GOLDEN * (b - a)
                fc = float(insertion_gradient(tables, sys, sp, c, counter)[i])
            else:
                a, c, fc = c, dpt, fd
                dpt = a + GOLDEN * (b - a)
                fd = float(insertion_gradient(tables, sys, sp, dpt, counter)[i])
            extra += 1
        f_star, t_star = (fc, c) if fc <= fd else (fd, dpt)
        if f_star < theta:
            theta, t_best = float(f_star), float(t_star)
    return theta, i + 1, t_best, extra


@dataclass(frozen=True)
class IterRecord:
    k: int
    J: float
    theta: float
    gamma: float | None
    mults: int
    lambda_used: int
    millis: float
    M: int


@dataclass
class BacktrackResult:
    accepted: bool
    gamma: float | None = None
    control: SwitchingControl | None = None
    schedule: ModeSchedule | None = None
    cost: float | None = None
    trials: int = 0


def backtrack(tables: TransitionTables, u: SwitchingControl, d_ctrl: np.ndarray,
              theta: float, J: float, quad: _QuadCache, x0: np.ndarray,
              params: SiomsParams, gamma0: float) -> BacktrackResult:
    """Projection-based backtracking line search.

    Tries gamma = gamma0 * beta^m and accepts the first projected control
    with sufficient decrease against the first-order model of the step: the
    insertion-gradient integral over the control cells the projection
    actually changed,

        J(trial) - J <= c_armijo * sum_changed d_new(t) dt.

    Every changed cell has d_new < -1/gamma, so the predicted drop is
    strictly negative whenever the control changes at all.
    """
    if theta >= 0:
        raise ValueError("backtracking requires a strict descent direction")
    onehot = u.values
    current = schedule_from_control(u)
    cell = float(u.grid[1] - u.grid[0])
    state = {"trials": 0}

    def try_gamma(gamma: float):
        mu = onehot - gamma * d_ctrl
        active = np.argmax(mu, axis=1) + 1
        trial_u = SwitchingControl(grid=u.grid, active=active, N=u.N)
        trial_schedule = schedule_from_control(trial_u)
        state["trials"] += 1
        if trial_schedule == current:
            return None
        changed = active != u.active
        predicted_drop = cell * float(np.sum(d_ctrl[changed, active[changed] - 1]))
        sp = precompute_switch_points(tables, trial_schedule, x0, quad.P1)
        J_trial = schedule_cost(tables, sp, quad)
        ok = J_trial <= J + params.c_armijo * predicted_drop
        return ok, trial_u, trial_schedule, J_trial

    gamma_hi = None  # smallest gamma seen that changes the control
    gamma_lo = None  # largest gamma seen that does not
    for m in range(params.m_max + 1):
        gamma = gamma0 * params.beta ** m
        res = try_gamma(gamma)
        if res is None:
            gamma_lo = gamma
            break
        ok, trial_u, trial_schedule, J_trial = res
        if ok:
            return BacktrackResult(True, gamma, trial_u, trial_schedule, J_trial,
                                   state["trials"])
        gamma_hi = gamma

    # The geometric ladder can jump over the step sizes whose insertions are
    # small enough to satisfy the decrease test (the changed set shrinks
    # discontinuously with gamma). Log-bisect the bracket down to the
    # smallest insertions the control grid can express.
    if gamma_hi is not None and gamma_lo is not None:
        for _ in range(params.bisect_trials):
            if gamma_hi / gamma_lo < 1.0 + 1e-4:
                break
            gamma = float(np.sqrt(gamma_lo * gamma_hi))
            res = try_gamma(gamma)
            if res is None:
                gamma_lo = gamma
                continue
            ok, trial_u, trial_schedule, J_trial = res
            if ok:
                return BacktrackResult(True, gamma, trial_u, trial_schedule, J_trial,
                                       state["trials"])
            gamma_hi = gamma
    return BacktrackResult(False, trials=state["trials"])


@dataclass
class RunReport:
    """Everything one open-loop solve produced."""

    t0: float
    tM: float
    iterations: list[IterRecord]
    final_schedule: ModeSchedule
    final_control: SwitchingControl
    final_cost: float
    final_theta: float
    accepted_steps: int
    termination: str
    trajectory_times: np.ndarray
    trajectory_states: np.ndarray
    trajectory_modes: np.ndarray
    integration_calls_iterative: int
    integration_steps_iterative: int
    table_meta: dict
    scenario: str | None = None
    total_millis: float = 0.0

    @property
    def initial_cost(self) -> float:
        return self.iterations[0].J


def solve(sys: SwitchedLinearSystem, cost: QuadraticCost, u0: SwitchingControl,
          params: SiomsParams | None = None,
          tables: TransitionTables | None = None,
          scenario: str | None = None,
          x0: np.ndarray | None = None) -> RunReport:
    """Run the iterative mode-scheduling descent from u0.

    Tables are built here when not supplied; the iterative phase itself
    performs no integration, which the returned report asserts via the
    integration meter. ``x0`` overrides the system's initial state (used by
    the receding-horizon loop to start from the measured state).
    """
    params = params or SiomsParams()
    if tables is None:
        tables = build_tables(sys, cost, u0.t0, u0.tM)
    if not (abs(tables.t0 - u0.t0) < 1e-9 and abs(tables.tM - u0.tM) < 1e-9):
        raise ValueError("tables do not cover the control horizon")

    t_solve0 = time.perf_counter()
    quad = _make_quad_cache(cost, u0.t0, u0.tM, params.quad_points)
    lam_times = np.linspace(u0.t0, u0.tM, params.lambda_eval)
    x0 = sys.x0 if x0 is None else np.asarray(x0, dtype=float)
    meter_before = METER.snapshot()

    u = u0
    schedule = schedule_from_control(u0)
    history: list[IterRecord] = []
    J = None
    accepted = 0
    termination = "max_iter"

    theta_tol = params.theta_tol
    gamma0 = params.gamma0

    lam_mode_cache = [sys.mode_matrix(i, lam_times) for i in range(1, sys.N + 1)]
    for k in range(max(1, params.max_iter + 1)):
        it_t0 = time.perf_counter()
        counter = MultCounter()
        sp = precompute_switch_points(tables, schedule, x0, quad.P1, counter)
        if J is None:
            J = schedule_cost(tables, sp, quad)
        d = insertion_gradient(tables, sys, sp, lam_times, counter,
                               mode_cache=lam_mode_cache)
        theta, i0, t_theta, extra = optimality_measure(
            d, lam_times, tables, sys, sp,
            refine_steps=params.refine_steps, counter=counter)
        lambda_used = params.lambda_eval + extra

        if theta_tol is None:
            theta_tol = 1e-3 * abs(theta)
        if gamma0 is None:
            # 10/|theta| keeps the insertion threshold 1/|theta| a fixed
            # number of ladder steps below gamma0 at every gradient scale;
            # a tighter cap would forbid insertions outright once the
            # optimality measure falls below its reciprocal
            gamma0 = min(10.0 / abs(theta), 1e8) if theta != 0.0 else 1.0

        record = IterRecord(k=k, J=float(J), theta=float(theta), gamma=None,
                            mults=counter.count, lambda_used=lambda_used,
                            millis=(time.perf_counter() - it_t0) * 1e3,
                            M=schedule.M)
        history.append(record)

        if abs(theta) <= theta_tol:
            termination = "theta_tol"
            break
        if k == params.max_iter:
            termination = "max_iter"
            break

        d_ctrl = np.empty((u.grid.size, sys.N))
        for i in range(sys.N):
            d_ctrl[:, i] = np.interp(u.grid, lam_times, d[:, i])
        bt = backtrack(tables, u, d_ctrl, theta, J, quad, x0, params, gamma0)
        if not bt.accepted:
            termination = "backtrack_failure"
            break
        history[-1] = replace(record, gamma=bt.gamma,
                              millis=(time.perf_counter() - it_t0) * 1e3)
        u, schedule, J = bt.control, bt.schedule, bt.cost
        accepted += 1

    meter_after = METER.snapshot()
    final_sp = precompute_switch_points(tables, schedule, x0, quad.P1)
    traj_x = _states_at(tables, final_sp, u.grid)
    report = RunReport(
        t0=u0.t0,
        tM=u0.tM,
        iterations=history,
        final_schedule=schedule,
        final_control=u,
        final_cost=float(history[-1].J),
        final_theta=float(history[-1].theta),
        accepted_steps=accepted,
        termination=termination,
        trajectory_times=u.grid.copy(),
        trajectory_states=traj_x,
        trajectory_modes=u.active.copy(),
        integration_calls_iterative=meter_after[0] - meter_before[0],
        integration_steps_iterative=meter_after[1] - meter_before[1],
        table_meta=tables.content_key(),
        scenario=scenario,
        total_millis=(time.perf_counter() - t_solve0) * 1e3,
    )
    if report.integration_steps_iterative != 0:
        raise NumericalError(
            "integration occurred during the iterative phase; "
            "this solver must stay table-only"
        )
    return report
