"""Named experiment scenarios: the two built-in benchmark systems plus a
YAML loader for user-defined ones.

A scenario bundles the switched system (optionally parameterized, so the
Monte-Carlo harness can perturb physical constants), the quadratic cost, the
initial control, solver settings, and optional receding-horizon /
disturbance / Monte-Carlo sections. Matrix entries are expression strings in
t and may reference scenario parameters with ``{name}`` placeholders.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .errors import ConfigError
from .model import QuadraticCost, SwitchedLinearSystem
from .optimizer import SiomsParams
from .receding import Disturbance


@dataclass(frozen=True)
class TableSettings:
    spacing: float = 1e-3
    fine_step: float = 1e-4
    interp: str = "cubic"


@dataclass(frozen=True)
class RhSettings:
    T: float
    delta: float
    duration: float
    inner_iters: int = 5
    table_spacing: float = 5e-3
    fine_step: float = 1e-4


@dataclass(frozen=True)
class McSettings:
    horizon: tuple[float, float]
    T: float
    delta: float
    noise_param: str
    noise_nominal: float
    noise_low: float
    noise_high: float
    x0: tuple[float, ...] | None = None  # defaults to the scenario's x0
    inner_iters: int = 5
    open_iters: int = 15
    lambda_eval: int = 200
    quad_points: int = 501
    table_spacing: float = 1e-2
    fine_step: float = 1e-3
    plant_fine_step: float = 2.5e-4


@dataclass(frozen=True)
class Scenario:
    name: str
    mode_entries: tuple  # raw entry templates per mode (strings or numbers)
    x0: tuple[float, ...]
    params: dict
    cost_entries: tuple
    P1: np.ndarray
    t0: float
    tM: float
    u0_mode: int = 1
    labels: tuple[str, ...] | None = None
    control_spacing: float = 1e-3
    tables: TableSettings = field(default_factory=TableSettings)
    solver: SiomsParams = field(default_factory=SiomsParams)
    rh: RhSettings | None = None
    disturbances: tuple[Disturbance, ...] = ()
    mc: McSettings | None = None

    def make_system(self, **overrides) -> SwitchedLinearSystem:
        """Instantiate the switched system with parameter overrides applied
        to the entry templates."""
        values = dict(self.params)
        unknown = set(overrides) - set(values)
        if unknown and self.params:
            raise ConfigError(f"unknown parameter override(s): {sorted(unknown)}")
        values.update(overrides)
        modes = [
            [[_render(e, values) for e in row] for row in mode]
            for mode in self.mode_entries
        ]
        return SwitchedLinearSystem.from_entries(modes, self.x0, labels=self.labels)

    @property
    def system(self) -> SwitchedLinearSystem:
        return self.make_system()

    @property
    def cost(self) -> QuadraticCost:
        q = [[_render(e, self.params) for e in row] for row in self.cost_entries]
        return QuadraticCost.from_entries(q, self.P1, self.t0, self.tM)

    def with_horizon(self, t0: float, tM: float) -> "Scenario":
        return replace(self, t0=float(t0), tM=float(tM))


def _render(entry, params: dict):
    if isinstance(entry, str) and "{" in entry:
        try:
            return entry.format_map({k: repr(v) for k, v in params.items()})
        except KeyError as e:
            raise ConfigError(f"entry {entry!r} references unknown parameter {e}") from None
    return entry


def spring_mass() -> Scenario:
    """Switched-stiffness vibration damping of a spring-mass-damper.

    Two time-invariant modes that differ only in spring stiffness; the
    objective penalizes position and velocity over a 2 s horizon.
    """
    k1, k2, m, d = 30.0, 70.0, 1.0, 2.0
    modes = tuple(
        ((0.0, 1.0), (-k / m, -d / m)) for k in (k1, k2)
    )
    return Scenario(
        name="spring_mass",
        mode_entries=modes,
        x0=(1.0, 0.0),
        params={},
        cost_entries=((1.0, 0.0), (0.0, 0.1)),
        P1=np.zeros((2, 2)),
        t0=0.0,
        tM=2.0,
        u0_mode=2,
        labels=("soft", "stiff"),
        tables=TableSettings(spacing=1e-3, fine_step=1e-4),
        solver=SiomsParams(max_iter=30),
    )


def cart_mass() -> Scenario:
    """Cart with a suspended mass on a string of time-varying length.

    The cart acceleration switches between three fixed values; the linearized
    model is made linear (not affine) by a constant auxiliary state, and the
    objective regulates the string angle while keeping the cart near the
    origin. The damping constant ``c`` is the Monte-Carlo noise parameter.
    """
    alphas = (0.0, -0.5, 0.5)
    modes = []
    for a in alphas:
        modes.append((
            (0.0, 1.0, 0.0, 0.0, 0.0),
            (0.0, 0.0, 0.0, 0.0, -a),
            (0.0, 0.0, 0.0, 1.0, 0.0),
            (0.0, 0.0, "-{g}/(sin(t)+2)",
             "-{c}/({m}*(sin(t)+2)*(sin(t)+2))",
             f"({-a!r})/(sin(t)+2)"),
            (0.0, 0.0, 0.0, 0.0, 0.0),
        ))
    return Scenario(
        name="cart_mass",
        mode_entries=tuple(modes),
        x0=(0.5, 0.0, 0.1, 0.0, 1.0),
        params={"c": 0.05, "m": 0.124, "g": 9.8},
        cost_entries=tuple(tuple(row) for row in np.diag([0.0, 0.0, 10.0, 1.0, 0.0])),
        P1=np.diag([0.1, 0.01, 10.0, 1.0, 0.0]),
        t0=0.0,
        tM=40.0,
        u0_mode=1,
        labels=("coast", "push_left", "push_right"),
        control_spacing=1e-3,
        tables=TableSettings(spacing=5e-3, fine_step=1e-4),
        solver=SiomsParams(max_iter=15),
        rh=RhSettings(T=3.0, delta=0.5, duration=40.0, inner_iters=5,
                      table_spacing=5e-3, fine_step=1e-4),
        disturbances=(Disturbance(time=14.0, index=4, magnitude=0.2),),
        mc=McSettings(horizon=(0.0, 6.0), T=3.0, delta=0.2,
                      noise_param="c", noise_nominal=0.05,
                      noise_low=-0.05, noise_high=3.0,
                      x0=(0.0, 0.0, 0.03, 0.0, 1.0)),
    )


BUILTINS = {"spring_mass": spring_mass, "cart_mass": cart_mass}


def get_scenario(name: str) -> Scenario:
    if name in BUILTINS:
        return BUILTINS[name]()
    raise ConfigError(f"unknown scenario {name!r}; built-ins: {sorted(BUILTINS)}")


def _req(mapping, key, path, kind=None):
    if not isinstance(mapping, dict) or key not in mapping:
        raise ConfigError(f"missing field '{path}.{key}'" if path else f"missing field '{key}'")
    value = mapping[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"field '{path + '.' if path else ''}{key}' has wrong type "
                          f"({type(value).__name__})")
    return value


def load_scenario(path: str) -> Scenario:
    """Read a scenario from a YAML file; errors cite the offending field (or
    the line for YAML syntax problems)."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        loc = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}: invalid YAML{loc}: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: scenario file must be a mapping")

    name = raw.get("name", "unnamed")
    system = _req(raw, "system", "", dict)
    modes = _req(system, "modes", "system", list)
    x0 = _req(system, "x0", "system", list)
    params = system.get("params", {}) or {}
    labels = system.get("labels")
    costsec = _req(raw, "cost", "", dict)
    Q = _req(costsec, "Q", "cost", list)
    P1 = _req(costsec, "P1", "cost", list)
    t0 = float(_req(costsec, "t0", "cost", (int, float)))
    tM = float(_req(costsec, "tM", "cost", (int, float)))

    tab = raw.get("tables", {}) or {}
    tables = TableSettings(
        spacing=float(tab.get("spacing", 1e-3)),
        fine_step=float(tab.get("fine_step", 1e-4)),
        interp=str(tab.get("interp", "cubic")),
    )
    solver_kwargs = raw.get("solver", {}) or {}
    try:
        solver = SiomsParams(**solver_kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"field 'solver': {e}") from None

    rh = None
    if raw.get("rh"):
        rhsec = raw["rh"]
        rh = RhSettings(
            T=float(_req(rhsec, "T", "rh", (int, float))),
            delta=float(_req(rhsec, "delta", "rh", (int, float))),
            duration=float(_req(rhsec, "duration", "rh", (int, float))),
            inner_iters=int(rhsec.get("inner_iters", 5)),
            table_spacing=float(rhsec.get("table_spacing", 5e-3)),
            fine_step=float(rhsec.get("fine_step", 1e-4)),
        )
    disturbances = tuple(
        Disturbance(time=float(_req(d, "time", "disturbances", (int, float))),
                    index=int(_req(d, "index", "disturbances", int)),
                    magnitude=float(_req(d, "magnitude", "disturbances", (int, float))))
        for d in raw.get("disturbances", []) or []
    )
    mc = None
    if raw.get("mc"):
        mcsec = raw["mc"]
        noise = _req(mcsec, "noise", "mc", dict)
        horizon = _req(mcsec, "horizon", "mc", list)
        mc = McSettings(
            horizon=(float(horizon[0]), float(horizon[1])),
            T=float(_req(mcsec, "T", "mc", (int, float))),
            delta=float(_req(mcsec, "delta", "mc", (int, float))),
            noise_param=str(_req(noise, "param", "mc.noise", str)),
            noise_nominal=float(_req(noise, "nominal", "mc.noise", (int, float))),
            noise_low=float(_req(noise, "low", "mc.noise", (int, float))),
            noise_high=float(_req(noise, "high", "mc.noise", (int, float))),
            x0=tuple(float(v) for v in mcsec["x0"]) if mcsec.get("x0") else None,
            inner_iters=int(mcsec.get("inner_iters", 5)),
            open_iters=int(mcsec.get("open_iters", 15)),
            lambda_eval=int(mcsec.get("lambda_eval", 200)),
            quad_points=int(mcsec.get("quad_points", 501)),
            table_spacing=float(mcsec.get("table_spacing", 1e-2)),
            fine_step=float(mcsec.get("fine_step", 1e-3)),
            plant_fine_step=float(mcsec.get("plant_fine_step", 2.5e-4)),
        )

    try:
        scenario = Scenario(
            name=str(name),
            mode_entries=tuple(tuple(tuple(row) for row in m) for m in modes),
            x0=tuple(float(v) for v in x0),
            params=dict(params),
            cost_entries=tuple(tuple(row) for row in Q),
            P1=np.asarray(P1, dtype=float),
            t0=t0,
            tM=tM,
            u0_mode=int(raw.get("u0_mode", 1)),
            labels=tuple(labels) if labels else None,
            control_spacing=float(raw.get("control_spacing", 1e-3)),
            tables=tables,
            solver=solver,
            rh=rh,
            disturbances=disturbances,
            mc=mc,
        )
        # validate eagerly so config problems surface as ConfigError here
        scenario.system
        scenario.cost
    except (ValueError, TypeError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{path}: {e}") from None
    return scenario
