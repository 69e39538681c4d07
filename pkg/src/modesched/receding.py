"""Closed-loop receding-horizon control.

Every ``delta`` seconds the controller re-optimizes over a sliding window of
length ``T`` starting from the measured plant state, applies only the first
``delta`` seconds of the result, and slides its operator tables forward with
the splice update, so fresh integration covers only the newly revealed
interval [tM, tM + delta] regardless of T.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ._integrate import METER
from .errors import NumericalError
from .model import (
    ModeSchedule,
    QuadraticCost,
    SwitchedLinearSystem,
    SwitchingControl,
    control_from_schedule,
    uniform_grid,
)
from .optimizer import SiomsParams, solve
from .plant import PlantConfig, propagate
from .transition import TransitionTables, build_tables, window_advance


@dataclass(frozen=True)
class RhConfig:
    """Receding-horizon settings: window length T, control interval delta,
    inner solver budget, and table build parameters."""

    T: float
    delta: float
    total_duration: float
    inner: SiomsParams = field(default_factory=lambda: SiomsParams(max_iter=5))
    control_spacing: float = 1e-3
    table_spacing: float = 5e-3
    fine_step: float = 1e-4
    interp: str = "cubic"
    u0_mode: int = 1

    def __post_init__(self):
        if not 0 < self.delta <= self.T:
            raise ValueError("need 0 < delta <= T")
        if self.total_duration < self.delta:
            raise ValueError("total_duration must cover at least one step")
        if abs(round(self.delta / self.table_spacing) * self.table_spacing - self.delta) > 1e-9:
            raise ValueError("delta must be a whole number of table cells")


@dataclass(frozen=True)
class Disturbance:
    """Instantaneous additive jump on one state component (1-based index)."""

    time: float
    index: int
    magnitude: float


@dataclass(frozen=True)
class RhStepRecord:
    step: int
    t: float
    measured_state: np.ndarray
    j_warm: float
    j_final: float
    theta_final: float
    optimize_seconds: float
    integration_steps: int
    slice_sigma: tuple[int, ...]
    slice_tau: tuple[float, ...]


@dataclass
class RhLog:
    steps: list[RhStepRecord] = field(default_factory=list)
    trajectory_times: np.ndarray | None = None
    trajectory_states: np.ndarray | None = None
    trajectory_modes: np.ndarray | None = None
    applied: list[ModeSchedule] = field(default_factory=list)
    disturbances_applied: list[Disturbance] = field(default_factory=list)
    aborted: str | None = None


class RecedingController:
    """Owns the sliding tables and warm-start schedule between steps."""

    def __init__(self, sys: SwitchedLinearSystem, cost: QuadraticCost,
                 cfg: RhConfig, t_start: float = 0.0,
                 tables: TransitionTables | None = None):
        self.sys = sys
        self.cost = cost
        self.cfg = cfg
        if tables is None:
            tables = build_tables(sys, cost, t_start, t_start + cfg.T,
                                  spacing=cfg.table_spacing,
                                  fine_step=cfg.fine_step, interp=cfg.interp)
        self.tables = tables
        self.warm = ModeSchedule((cfg.u0_mode,), (), tables.t0, tables.tM)
        self._step = 0

    @property
    def window_start(self) -> float:
        return self.tables.t0

    def set_warm(self, schedule: ModeSchedule) -> None:
        self.warm = schedule.restrict(self.tables.t0, self.tables.tM, extend=True)

    def step(self, x_measured: np.ndarray) -> tuple[ModeSchedule, RhStepRecord]:
        """One control update: optimize the window from the measured state,
        return the first delta seconds, slide the tables."""
        t0 = self.tables.t0
        tM = self.tables.tM
        meter_before = METER.snapshot()
        wall0 = time.perf_counter()
        grid = uniform_grid(t0, tM, self.cfg.control_spacing)
        u0 = control_from_schedule(self.warm, grid, N=self.sys.N)
        report = solve(self.sys, self.cost, u0, self.cfg.inner,
                       tables=self.tables, x0=np.asarray(x_measured, float))
        optimize_seconds = time.perf_counter() - wall0
        slice_schedule = report.final_schedule.restrict(t0, t0 + self.cfg.delta)

        self.tables = window_advance(self.tables, self.sys, self.cost, self.cfg.delta)
        self.warm = report.final_schedule.restrict(
            self.tables.t0, self.tables.tM, extend=True)
        meter_after = METER.snapshot()

        record = RhStepRecord(
            step=self._step,
            t=t0,
            measured_state=np.asarray(x_measured, float).copy(),
            j_warm=report.iterations[0].J,
            j_final=report.final_cost,
            theta_final=report.final_theta,
            optimize_seconds=optimize_seconds,
            integration_steps=meter_after[1] - meter_before[1],
            slice_sigma=slice_schedule.sigma,
            slice_tau=slice_schedule.tau,
        )
        self._step += 1
        return slice_schedule, record


def run_closed_loop(sys: SwitchedLinearSystem, cost: QuadraticCost, cfg: RhConfig,
                    plant: PlantConfig | SwitchedLinearSystem,
                    disturbances=(), x0: np.ndarray | None = None,
                    t_start: float = 0.0) -> RhLog:
    """Alternate controller steps and plant propagation for the configured
    duration, injecting disturbance jumps at their scheduled times."""
    if isinstance(plant, SwitchedLinearSystem):
        plant = PlantConfig(system=plant)
    if plant.system.n != sys.n:
        raise ValueError("plant dimension does not match the model")
    x = np.asarray(sys.x0 if x0 is None else x0, dtype=float).copy()
    disturbances = sorted((Disturbance(*d) if isinstance(d, tuple) else d
                           for d in disturbances), key=lambda d: d.time)
    pending = list(disturbances)

    controller = RecedingController(sys, cost, cfg, t_start=t_start)
    log = RhLog()
    times: list[np.ndarray] = []
    states: list[np.ndarray] = []
    modes: list[np.ndarray] = []

    t = t_start
    t_end = t_start + cfg.total_duration
    while t < t_end - 1e-9:
        slice_schedule, record = controller.step(x)
        log.steps.append(record)
        log.applied.append(slice_schedule)
        seg_end = min(t + cfg.delta, t_end)

        cuts = [t]
        for d in pending:
            if t <= d.time < seg_end:
                cuts.append(d.time)
        cuts.append(seg_end)
        try:
            for a, b in zip(cuts[:-1], cuts[1:]):
                for d in pending[:]:
                    if abs(d.time - a) < 1e-12:
                        if not 1 <= d.index <= x.size:
                            raise ValueError(f"disturbance index {d.index} outside 1..{x.size}")
                        x[d.index - 1] += d.magnitude
                        log.disturbances_applied.append(d)
                        pending.remove(d)
                if b - a < 1e-12:
                    continue
                ts, xs = propagate(plant, x, slice_schedule, a, b)
                x = xs[-1].copy()
                if times:
                    ts, xs = ts[1:], xs[1:]
                times.append(ts)
                states.append(xs)
                modes.append(np.asarray(slice_schedule.mode_at(np.minimum(ts, slice_schedule.tM)), dtype=int))
        except NumericalError as e:
            log.aborted = str(e)
            break
        t = seg_end

    if times:
        log.trajectory_times = np.concatenate(times)
        log.trajectory_states = np.concatenate(states)
        log.trajectory_modes = np.concatenate(modes)
    return log
