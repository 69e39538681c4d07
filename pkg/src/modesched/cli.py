"""Command-line driver for the scenario experiments.

Subcommands:
  solve       open-loop optimization of a scenario
  bench       time/error comparison of the three methods over sample counts
  montecarlo  robustness study with perturbed plant parameters
  rh          closed-loop receding-horizon run with scenario disturbances
  serve       interactive live simulation over WebSockets

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error. Flags override the matching scenario-file settings.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

import numpy as np

from . import reports
from .errors import ConfigError, NumericalError
from .model import SwitchingControl, uniform_grid
from .optimizer import SiomsParams, solve
from .plant import PlantConfig, monte_carlo
from .receding import RhConfig, run_closed_loop
from .scenarios import Scenario, get_scenario, load_scenario
from .transition import build_tables

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _load(args) -> Scenario:
    if args.config:
        scenario = load_scenario(args.config)
    else:
        scenario = get_scenario(args.scenario)
    if getattr(args, "horizon", None) is not None:
        scenario = scenario.with_horizon(scenario.t0, scenario.t0 + args.horizon)
    return scenario


def _solver_params(scenario: Scenario, args) -> SiomsParams:
    params = scenario.solver
    if getattr(args, "iters", None) is not None:
        params = replace(params, max_iter=args.iters)
    return params


def cmd_solve(args) -> int:
    scenario = _load(args)
    system = scenario.system
    cost = scenario.cost
    params = _solver_params(scenario, args)
    grid = uniform_grid(scenario.t0, scenario.tM, scenario.control_spacing)
    u0 = SwitchingControl.constant(grid, scenario.u0_mode, system.N)
    tables = build_tables(system, cost, scenario.t0, scenario.tM,
                          spacing=scenario.tables.spacing,
                          fine_step=scenario.tables.fine_step,
                          interp=scenario.tables.interp)
    report = solve(system, cost, u0, params, tables=tables, scenario=scenario.name)
    out = reports.ensure_out_dir(args.out)
    reports.write_structured(out / "report.json",
                             reports.report_to_dict(report, args.with_timings))
    if args.format == "csv":
        reports.write_trajectory_csv(out / "trajectory.csv",
                                     report.trajectory_times,
                                     report.trajectory_states,
                                     report.trajectory_modes)
    print(f"solve {scenario.name}: J0={report.initial_cost:.6g} "
          f"J={report.final_cost:.6g} after {report.accepted_steps} accepted steps "
          f"({report.termination}); wrote {out / 'report.json'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .baseline import bench

    scenario = _load(args)
    n_list = tuple(int(v) for v in args.samples.split(","))
    result = bench(scenario, n_list=n_list,
                   iterations=args.iters if args.iters is not None else 10,
                   repeats=args.repeats)
    out = reports.ensure_out_dir(args.out)
    reports.bench_to_csv(out / "bench.csv", result)
    reports.write_structured(out / "bench.json", reports.bench_to_dict(result))
    for c in result.cells:
        print(f"{c.method:>8s} N={c.n_samples:<6d} {c.seconds:8.3f}s "
              f"rms={c.rms_error:.3e} J={c.final_cost:.4f}")
    print(f"wrote {out / 'bench.csv'}")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    scenario = _load(args)
    result = monte_carlo(scenario, n_runs=args.runs, seed=args.seed, jobs=args.jobs)
    out = reports.ensure_out_dir(args.out)
    reports.write_structured(out / "montecarlo.json", reports.mc_to_dict(result))
    print(f"montecarlo {scenario.name}: {args.runs} runs, seed {args.seed}")
    print(f"  open   mean={result.open_mean:.6g} std={result.open_std:.6g} "
          f"excluded={result.excluded_open}")
    print(f"  closed mean={result.closed_mean:.6g} std={result.closed_std:.6g} "
          f"excluded={result.excluded_closed}")
    print(f"wrote {out / 'montecarlo.json'}")
    return EXIT_OK


def cmd_rh(args) -> int:
    scenario = _load(args)
    if scenario.rh is None:
        raise ConfigError(f"scenario {scenario.name!r} has no rh section")
    rh = scenario.rh
    delta = args.delta if args.delta is not None else rh.delta
    cfg = RhConfig(T=rh.T, delta=delta,
                   total_duration=args.duration if args.duration is not None else rh.duration,
                   inner=SiomsParams(max_iter=rh.inner_iters),
                   control_spacing=scenario.control_spacing,
                   table_spacing=rh.table_spacing, fine_step=rh.fine_step,
                   u0_mode=scenario.u0_mode)
    system = scenario.system
    log = run_closed_loop(system, scenario.cost, cfg, PlantConfig(system=system),
                          disturbances=scenario.disturbances,
                          x0=np.asarray(scenario.x0), t_start=scenario.t0)
    out = reports.ensure_out_dir(args.out)
    reports.write_structured(out / "rh.json", reports.rhlog_to_dict(log, args.with_timings))
    if log.trajectory_times is not None:
        reports.write_trajectory_csv(out / "rh_trajectory.csv",
                                     log.trajectory_times,
                                     log.trajectory_states,
                                     log.trajectory_modes)
    print(f"rh {scenario.name}: {len(log.steps)} steps"
          + (f", aborted: {log.aborted}" if log.aborted else "")
          + f"; wrote {out / 'rh.json'}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import asyncio

    from .live import serve as live_serve

    scenario = _load(args)
    if args.ui_dir:
        import functools
        import http.server
        import threading

        handler = functools.partial(http.server.SimpleHTTPRequestHandler,
                                    directory=args.ui_dir)
        httpd = http.server.ThreadingHTTPServer((args.host, args.ui_port), handler)
        threading.Thread(target=httpd.serve_forever, daemon=True).start()
        print(f"ui: http://{args.host}:{args.ui_port}/")
    print(f"live session: ws://{args.host}:{args.port}/ (scenario {scenario.name}, "
          f"ratio {args.ratio})")
    asyncio.run(live_serve(scenario, host=args.host, port=args.port,
                           ratio=args.ratio, duration=args.duration))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modesched",
                                     description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("scenario", nargs="?", default="spring_mass",
                           help="built-in scenario name")
            p.add_argument("--config", help="scenario YAML file (overrides the name)")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--format", choices=("csv", "structured"), default="csv",
                       help="csv also writes trajectory tables")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--with-timings", action="store_true",
                       help="include wall-clock timings (breaks byte determinism)")

    p = sub.add_parser("solve", help="open-loop optimization")
    common(p)
    p.add_argument("--iters", type=int, default=None, help="iteration budget")
    p.add_argument("--horizon", type=float, default=None, help="override horizon length (s)")
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("bench", help="method comparison over sample counts")
    common(p)
    p.add_argument("--samples", default="100,400,1600,6400,20001",
                   help="comma-separated sample counts")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--repeats", type=int, default=5, help="timing repetitions (median)")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("montecarlo", help="parameter-robustness study")
    common(p)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(fn=cmd_montecarlo)

    p = sub.add_parser("rh", help="closed-loop receding-horizon run")
    common(p)
    p.add_argument("--delta", type=float, default=None, help="control interval (s)")
    p.add_argument("--duration", type=float, default=None, help="total run length (s)")
    p.set_defaults(fn=cmd_rh)

    p = sub.add_parser("serve", help="interactive live simulation service")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--ratio", type=float, default=1.0,
                   help="simulated seconds per wall second (0 = as fast as possible)")
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--ui-dir", default=None, help="static frontend directory to serve")
    p.add_argument("--ui-port", type=int, default=8766)
    p.set_defaults(fn=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename or e}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
