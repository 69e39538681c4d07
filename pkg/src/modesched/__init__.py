"""Optimal mode scheduling for switched linear time-varying systems.

The package optimizes which of N linear modes a system should follow, and
when to switch, to minimize a quadratic cost. All state and co-state
information needed during optimization is precomputed offline into
transition-operator tables, so the iterative phase is pure table algebra;
a sliding-window update keeps the closed-loop (receding-horizon) variant's
online integration proportional to the control interval rather than the
window length.
"""

from ._integrate import METER, IntegrationMeter
from .errors import ConfigError, ExprError, NumericalError, TableRangeError
from .expr import TimeExpr, parse_time_expr
from .model import (
    ModeSchedule,
    QuadraticCost,
    RealControl,
    SwitchedLinearSystem,
    SwitchingControl,
    control_from_schedule,
    eval_mode,
    schedule_from_control,
    uniform_grid,
)
from .optimizer import (
    IterRecord,
    MultCounter,
    RunReport,
    SiomsParams,
    backtrack,
    cost_of_schedule,
    eval_costate_factor,
    eval_state,
    insertion_gradient,
    optimality_measure,
    precompute_switch_points,
    project,
    solve,
)
from .plant import MonteCarloResult, PlantConfig, monte_carlo, propagate, trajectory_cost
from .receding import Disturbance, RecedingController, RhConfig, RhLog, run_closed_loop
from .scenarios import Scenario, cart_mass, get_scenario, load_scenario, spring_mass
from .transition import (
    TransitionTables,
    build_atm,
    build_stm,
    build_tables,
    load_tables,
    save_tables,
    tables_cache_key,
    window_advance,
)

__version__ = "0.1.0"

__all__ = [
    "METER",
    "IntegrationMeter",
    "ConfigError",
    "ExprError",
    "NumericalError",
    "TableRangeError",
    "TimeExpr",
    "parse_time_expr",
    "ModeSchedule",
    "QuadraticCost",
    "RealControl",
    "SwitchedLinearSystem",
    "SwitchingControl",
    "control_from_schedule",
    "eval_mode",
    "schedule_from_control",
    "uniform_grid",
    "IterRecord",
    "MultCounter",
    "RunReport",
    "SiomsParams",
    "backtrack",
    "cost_of_schedule",
    "eval_costate_factor",
    "eval_state",
    "insertion_gradient",
    "optimality_measure",
    "precompute_switch_points",
    "project",
    "solve",
    "MonteCarloResult",
    "PlantConfig",
    "monte_carlo",
    "propagate",
    "trajectory_cost",
    "Disturbance",
    "RecedingController",
    "RhConfig",
    "RhLog",
    "run_closed_loop",
    "Scenario",
    "cart_mass",
    "get_scenario",
    "load_scenario",
    "spring_mass",
    "TransitionTables",
    "build_atm",
    "build_stm",
    "build_tables",
    "load_tables",
    "save_tables",
    "tables_cache_key",
    "window_advance",
    "__version__",
]
