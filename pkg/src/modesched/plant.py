"""Ground-truth propagation of the switched plant and the Monte-Carlo
robustness harness.

``propagate`` is the reference integration used both as the simulated "real
system" in closed loop and as the oracle behind accuracy checks: fixed
fine-step 4th-order integration with steps split exactly at every switching
time. ``monte_carlo`` applies controls computed on the nominal model to
plants with randomly perturbed parameters and aggregates the realized costs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ._integrate import propagate_linear
from .errors import NumericalError
from .model import ModeSchedule, QuadraticCost, SwitchedLinearSystem, SwitchingControl, schedule_from_control

MAX_FINE_STEP = 1e-3


@dataclass(frozen=True)
class PlantConfig:
    """The system to propagate (already carrying any parameter overrides)
    plus integration settings."""

    system: SwitchedLinearSystem
    fine_step: float = 1e-4
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.fine_step > MAX_FINE_STEP:
            raise ValueError(f"fine step must be <= {MAX_FINE_STEP} s")


def propagate(plant: PlantConfig | SwitchedLinearSystem, x,
              schedule: ModeSchedule | SwitchingControl,
              t_from: float, t_to: float,
              fine_step: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Propagate the switched plant from x at t_from to t_to.

    Returns (times, states) densely sampled at the integrator's fine step,
    with samples exactly on every switching time inside the interval.
    """
    if isinstance(plant, PlantConfig):
        system = plant.system
        fine = plant.fine_step if fine_step is None else fine_step
    else:
        system = plant
        fine = 1e-4 if fine_step is None else fine_step
    if isinstance(schedule, SwitchingControl):
        schedule = schedule_from_control(schedule)
    if not t_from < t_to:
        raise ValueError("t_from must precede t_to")

    cuts = [t_from]
    for T in schedule.tau:
        if t_from < T < t_to:
            cuts.append(float(T))
    cuts.append(t_to)

    x_cur = np.asarray(x, dtype=float).copy()
    all_t: list[np.ndarray] = []
    all_x: list[np.ndarray] = []
    for a, b in zip(cuts[:-1], cuts[1:]):
        j = int(schedule.mode_at(min(0.5 * (a + b), schedule.tM)))
        ev = lambda times, jj=j: system.mode_matrix(jj, times)
        ts, xs = propagate_linear(ev, x_cur, a, b, fine)
        x_cur = xs[-1]
        if all_t:
            ts, xs = ts[1:], xs[1:]
        all_t.append(ts)
        all_x.append(xs)
    return np.concatenate(all_t), np.concatenate(all_x)


def trajectory_cost(cost: QuadraticCost, times: np.ndarray, states: np.ndarray,
                    terminal: bool = True) -> float:
    """Quadratic cost of a realized trajectory: trapezoid quadrature of
    x'Qx/2 over the samples plus the terminal term at the last sample."""
    Q = cost.q_matrix(times)
    integrand = 0.5 * np.einsum("ti,tij,tj->t", states, Q, states)
    J = float(np.trapezoid(integrand, times))
    if terminal:
        xT = states[-1]
        J += 0.5 * float(xT @ np.asarray(cost.P1) @ xT)
    return J


@dataclass(frozen=True)
class MonteCarloResult:
    open_costs: np.ndarray
    closed_costs: np.ndarray
    noise: np.ndarray
    excluded_open: int
    excluded_closed: int
    seed: int
    horizon: tuple[float, float]
    elapsed_s: float

    @property
    def open_mean(self) -> float:
        return float(np.mean(self.open_costs))

    @property
    def open_std(self) -> float:
        return float(np.std(self.open_costs))

    @property
    def closed_mean(self) -> float:
        return float(np.mean(self.closed_costs))

    @property
    def closed_std(self) -> float:
        return float(np.std(self.closed_costs))

    def histogram(self, bins: int = 20) -> dict:
        all_costs = np.concatenate([self.open_costs, self.closed_costs])
        lo, hi = float(np.min(all_costs)), float(np.max(all_costs))
        edges = np.linspace(lo, hi, bins + 1)
        open_counts, _ = np.histogram(self.open_costs, bins=edges)
        closed_counts, _ = np.histogram(self.closed_costs, bins=edges)
        return {
            "edges": edges.tolist(),
            "open": open_counts.tolist(),
            "closed": closed_counts.tolist(),
        }


def monte_carlo(scenario, n_runs: int = 100, seed: int = 0,
                noise_low: float | None = None, noise_high: float | None = None,
                jobs: int = 1) -> MonteCarloResult:
    """Robustness study: controls computed on the nominal model, applied to
    plants with uniformly perturbed damping.

    For each run the perturbed parameter is ``nominal + w`` with
    w ~ U[noise_low, noise_high]. The open-loop control is optimized once on
    the nominal model and replayed against every perturbed plant; the
    closed-loop variant re-optimizes every delta seconds from the perturbed
    plant's measured state. Costs are evaluated over the scenario's
    Monte-Carlo horizon on the realized trajectories. Runs that diverge are
    excluded from the statistics and counted.
    """
    from .receding import RhConfig, run_closed_loop
    from .model import uniform_grid
    from .optimizer import SiomsParams, solve
    from .transition import build_tables

    mc = scenario.mc
    if mc is None:
        raise ValueError(f"scenario {scenario.name!r} has no monte-carlo section")
    t0, tM = mc.horizon
    lo = mc.noise_low if noise_low is None else noise_low
    hi = mc.noise_high if noise_high is None else noise_high
    rng = np.random.default_rng(seed)
    noise = rng.uniform(lo, hi, size=n_runs)

    started = time.perf_counter()
    nominal = scenario.system
    cost = scenario.cost
    mc_cost = QuadraticCost(Q=cost.Q, P1=cost.P1, t0=t0, tM=tM)
    x0 = np.asarray(mc.x0 if mc.x0 is not None else scenario.x0, dtype=float)

    # one nominal open-loop solve, replayed against every perturbed plant
    grid = uniform_grid(t0, tM, scenario.control_spacing)
    u0 = SwitchingControl.constant(grid, scenario.u0_mode, nominal.N)
    tables = build_tables(nominal, mc_cost, t0, tM,
                          spacing=mc.table_spacing, fine_step=mc.fine_step)
    open_params = SiomsParams(max_iter=mc.open_iters, lambda_eval=mc.lambda_eval,
                              quad_points=mc.quad_points)
    open_report = solve(nominal, mc_cost, u0, open_params, tables=tables, x0=x0)
    open_schedule = open_report.final_schedule

    rh_cfg = RhConfig(
        T=mc.T, delta=mc.delta, total_duration=tM - t0,
        inner=SiomsParams(max_iter=mc.inner_iters, lambda_eval=mc.lambda_eval,
                          quad_points=mc.quad_points, refine_steps=0),
        control_spacing=scenario.control_spacing,
        table_spacing=mc.table_spacing, fine_step=mc.fine_step,
        u0_mode=scenario.u0_mode,
    )

    def one_run(w: float) -> tuple[float, float]:
        perturbed = scenario.make_system(**{mc.noise_param: mc.noise_nominal + w})
        plant = PlantConfig(system=perturbed, fine_step=mc.plant_fine_step)
        ts, xs = propagate(plant, x0, open_schedule, t0, tM)
        j_open = trajectory_cost(mc_cost, ts, xs)
        log = run_closed_loop(nominal, mc_cost, rh_cfg, plant,
                              disturbances=(), x0=x0, t_start=t0)
        j_closed = trajectory_cost(mc_cost, log.trajectory_times, log.trajectory_states)
        return j_open, j_closed

    results: list[tuple[float, float] | None] = [None] * n_runs
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for k, res in enumerate(pool.map(_RunTask(one_run), noise)):
                results[k] = res
    else:
        for k, w in enumerate(noise):
            try:
                results[k] = one_run(float(w))
            except NumericalError:
                results[k] = None

    open_costs = [r[0] for r in results if r is not None and np.isfinite(r[0])]
    closed_costs = [r[1] for r in results if r is not None and np.isfinite(r[1])]
    return MonteCarloResult(
        open_costs=np.asarray(open_costs),
        closed_costs=np.asarray(closed_costs),
        noise=noise,
        excluded_open=n_runs - len(open_costs),
        excluded_closed=n_runs - len(closed_costs),
        seed=seed,
        horizon=(t0, tM),
        elapsed_s=time.perf_counter() - started,
    )


class _RunTask:
    """Picklable wrapper so the per-run closure can cross process borders."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, w):
        try:
            return self.fn(float(w))
        except NumericalError:
            return None
