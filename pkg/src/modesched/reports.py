"""Serialization of run artifacts.

Structured reports are JSON documents with a ``format_version`` field and
sorted keys; identical inputs (scenario, seed, flags) produce byte-identical
files. Wall-clock timings are therefore left out unless explicitly requested
with ``with_timings`` (which breaks the byte-for-byte determinism contract
and says so in the document).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .optimizer import RunReport
from .plant import MonteCarloResult
from .receding import RhLog

FORMAT_VERSION = 1


def _num(x) -> str:
    return repr(float(x))


def report_to_dict(report: RunReport, with_timings: bool = False) -> dict:
    iterations = []
    for r in report.iterations:
        row = {"k": r.k, "J": r.J, "theta": r.theta, "gamma": r.gamma,
               "mults": r.mults, "lambda_used": r.lambda_used, "M": r.M}
        if with_timings:
            row["millis"] = r.millis
        iterations.append(row)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "run_report",
        "scenario": report.scenario,
        "horizon": [report.t0, report.tM],
        "iterations": iterations,
        "final": {
            "J": report.final_cost,
            "theta": report.final_theta,
            "sigma": list(report.final_schedule.sigma),
            "tau": list(report.final_schedule.tau),
            "accepted_steps": report.accepted_steps,
            "termination": report.termination,
        },
        "integration": {
            "calls_iterative": report.integration_calls_iterative,
            "steps_iterative": report.integration_steps_iterative,
        },
        "tables": report.table_meta,
        "timings_included": bool(with_timings),
    }
    if with_timings:
        doc["total_millis"] = report.total_millis
    return doc


def trajectory_rows(times, states, modes):
    for t, x, m in zip(times, states, modes):
        yield [float(t), *[float(v) for v in x], int(m)]


def write_trajectory_csv(path, times, states, modes) -> None:
    n = states.shape[1]
    header = "t," + ",".join(f"x{i}" for i in range(1, n + 1)) + ",mode"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in trajectory_rows(times, states, modes):
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def write_structured(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def rhlog_to_dict(log: RhLog, with_timings: bool = False) -> dict:
    steps = []
    for r in log.steps:
        row = {
            "step": r.step,
            "t": r.t,
            "measured_state": [float(v) for v in r.measured_state],
            "j_warm": r.j_warm,
            "j_final": r.j_final,
            "theta_final": r.theta_final,
            "integration_steps": r.integration_steps,
            "slice_sigma": list(r.slice_sigma),
            "slice_tau": list(r.slice_tau),
        }
        if with_timings:
            row["optimize_seconds"] = r.optimize_seconds
        steps.append(row)
    return {
        "format_version": FORMAT_VERSION,
        "kind": "rh_log",
        "steps": steps,
        "disturbances_applied": [
            {"time": d.time, "index": d.index, "magnitude": d.magnitude}
            for d in log.disturbances_applied
        ],
        "aborted": log.aborted,
        "timings_included": bool(with_timings),
    }


def mc_to_dict(result: MonteCarloResult, bins: int = 20) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "monte_carlo",
        "seed": result.seed,
        "horizon": list(result.horizon),
        "runs": int(result.noise.size),
        "noise": [float(w) for w in result.noise],
        "open_costs": [float(v) for v in result.open_costs],
        "closed_costs": [float(v) for v in result.closed_costs],
        "excluded": {"open": result.excluded_open, "closed": result.excluded_closed},
        "summary": {
            "open_mean": result.open_mean,
            "open_std": result.open_std,
            "closed_mean": result.closed_mean,
            "closed_std": result.closed_std,
        },
        "histogram": result.histogram(bins),
    }


def bench_to_csv(path, result) -> None:
    with open(path, "w") as fh:
        fh.write("method,N,seconds,rms_error,final_cost\n")
        for c in result.cells:
            fh.write(f"{c.method},{c.n_samples},{_num(c.seconds)},"
                     f"{_num(c.rms_error)},{_num(c.final_cost)}\n")


def bench_to_dict(result) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "bench",
        "cells": result.to_rows(),
    }


def ensure_out_dir(out) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path
