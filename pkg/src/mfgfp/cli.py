"""Command line runner for the fictitious play drivers.

    mfgfp exact-fp     --config run.cfg --out runs/exact
    mfgfp approx-fp    --config run.cfg --out runs/approx --diagnostics off
    mfgfp modelfree-fp --config run.cfg --out runs/mf --scale 10
    mfgfp report       runs/exact

Each run writes trace.csv, final_flow.csv, final_policy.csv and manifest.json.
``report`` adds closed-form comparison tables and the error-bound report to a
finished run directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from typing import List, Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunSettings, load_config, parse_bool
from .core import StateGrid, closed_form_equilibrium
from .diagnostics import REQUIRED_TRACE_COLUMNS, benchmark_errors, error_bound_report
from .fictitious_play import STATIONARY, FpTrace, run
from .flows import benchmark_density, format_float, read_flow_csv, write_flow_csv

log = logging.getLogger("mfgfp")

TRACE_FILE = "trace.csv"
FLOW_FILE = "final_flow.csv"
POLICY_FILE = "final_policy.csv"
MANIFEST_FILE = "manifest.json"
RUN_FILES = (TRACE_FILE, FLOW_FILE, POLICY_FILE)
REPORT_FILES = ("density_vs_closed_form.csv", "control_vs_closed_form.csv",
                "l2_density_by_iteration.csv", "l2_control_by_iteration.csv",
                "theorem2_report.txt")

DRIVERS = {"exact-fp": "exact", "approx-fp": "approximate", "modelfree-fp": "modelfree"}


class CliError(Exception):
    pass


def _settings(args, command: str) -> RunSettings:
    settings = load_config(args.config) if args.config else RunSettings()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.diagnostics is not None:
        overrides["diagnostics"] = args.diagnostics
    if args.scale is not None:
        overrides["scale"] = args.scale
    defaults = RunSettings()
    if command == "exact-fp" and settings.solver != "exact":
        raise ConfigError("exact-fp needs solver = exact")
    if command == "modelfree-fp":
        # the model-free driver only supports Q-learning on the stationary problem
        if settings.solver == defaults.solver:
            overrides["solver"] = "q_learning"
        if settings.mode == defaults.mode:
            overrides["mode"] = STATIONARY
    return replace(settings, **overrides).validate()


def _write_manifest(out_dir, payload: dict):
    with open(os.path.join(out_dir, MANIFEST_FILE), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def run_command(command: str, args) -> int:
    settings = _settings(args, command)
    os.makedirs(args.out, exist_ok=True)
    config = settings.build()
    start = time.perf_counter()
    result = run(config, DRIVERS[command])
    env = config.env
    result.trace.to_csv(os.path.join(args.out, TRACE_FILE))
    write_flow_csv(os.path.join(args.out, FLOW_FILE), result.flow, env.state_grid)
    write_flow_csv(os.path.join(args.out, POLICY_FILE),
                   result.policy.mean_action_values(env), env.state_grid)
    duration = time.perf_counter() - start
    _write_manifest(args.out, {
        "command": command,
        "config": settings.to_dict(),
        "seed": settings.seed,
        "version": __version__,
        "duration_seconds": duration,
        "outputs": list(RUN_FILES) + [MANIFEST_FILE],
    })
    log.info("%s finished in %.1f s, outputs in %s", command, duration, args.out)
    return 0


def _write_table(path, header: List[str], columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in zip(*columns):
            writer.writerow([v if isinstance(v, (int, np.integer)) else format_float(v)
                             for v in row])


def _trend_lines(l2: np.ndarray, name: str) -> List[str]:
    finite = l2[np.isfinite(l2)]
    if finite.size < 2:
        return [f"{name}: not enough iterations for a trend"]
    ref = min(5, finite.size)
    change = float(finite[-1] - finite[ref - 1])
    steps = np.diff(finite)
    return [
        f"{name} at iteration {ref}: {finite[ref - 1]:.12g}",
        f"{name} at iteration {finite.size}: {finite[-1]:.12g}",
        f"{name} change from iteration {ref} to {finite.size}: {change:.12g}",
        f"{name} decreased: {change < 0}",
        f"{name} fraction of non-increasing steps: {np.mean(steps <= 0):.12g}",
    ]


def report_command(run_dir: str) -> int:
    missing = [f for f in RUN_FILES + (MANIFEST_FILE,)
               if not os.path.isfile(os.path.join(run_dir, f))]
    if missing:
        raise CliError(f"{run_dir} lacks run outputs: {', '.join(missing)}")
    trace = FpTrace.from_csv(os.path.join(run_dir, TRACE_FILE))
    coords, flow = read_flow_csv(os.path.join(run_dir, FLOW_FILE))
    _, policy = read_flow_csv(os.path.join(run_dir, POLICY_FILE))
    with open(os.path.join(run_dir, MANIFEST_FILE), encoding="utf-8") as fh:
        manifest = json.load(fh)

    grid = StateGrid(coords.size)
    if not np.allclose(coords, grid.coordinates):
        raise CliError("report needs the unit-torus benchmark grid")
    a_star, mu_star = closed_form_equilibrium(grid)
    h = grid.cell_width
    masses = benchmark_density(flow)
    control = policy[0]
    l2_density, l2_control = benchmark_errors(masses, control, grid)

    x = grid.coordinates
    _write_table(os.path.join(run_dir, REPORT_FILES[0]),
                 ["x", "density", "closed_form_density", "difference"],
                 [x, masses / h, mu_star / h, (masses - mu_star) / h])
    _write_table(os.path.join(run_dir, REPORT_FILES[1]),
                 ["x", "control", "closed_form_control", "difference"],
                 [x, control, a_star, control - a_star])
    for fname, col in ((REPORT_FILES[2], "l2_density"), (REPORT_FILES[3], "l2_control")):
        if col not in trace:
            raise CliError(f"trace lacks the {col} column")
        _write_table(os.path.join(run_dir, fname), ["iteration", col],
                     [trace.iterations, trace[col]])

    lines = ["benchmark comparison",
             f"final l2_density (from outputs): {l2_density:.12g}",
             f"final l2_control (from outputs): {l2_control:.12g}"]
    lines += _trend_lines(trace["l2_density"], "l2_density")
    lines += _trend_lines(trace["l2_control"], "l2_control")
    lines.append("")
    if all(c in trace for c in REQUIRED_TRACE_COLUMNS):
        bounds = error_bound_report(trace)
        lines.append(bounds.to_text())
        trace.columns.update(bounds.to_columns())
        trace.to_csv(os.path.join(run_dir, TRACE_FILE))
    else:
        lines.append("error propagation bounds: diagnostic columns absent (blind run)\n")
    with open(os.path.join(run_dir, REPORT_FILES[4]), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    print("\n".join(lines[:8]))

    outputs = list(manifest.get("outputs", []))
    outputs += [f for f in REPORT_FILES if f not in outputs]
    manifest["outputs"] = outputs
    _write_manifest(run_dir, manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfgfp",
                                     description="Fictitious play for grid mean field games.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("exact-fp", "fictitious play with exact best responses"),
                       ("approx-fp", "fictitious play with an approximate solver"),
                       ("modelfree-fp", "sample-based fictitious play with Q-learning")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--diagnostics", type=parse_bool, metavar="on|off",
                       help="record exact-solver diagnostics")
        p.add_argument("--scale", type=float, help="desk-scale divisor for rollouts")
    p = sub.add_parser("report", help="closed-form comparison of a finished run")
    p.add_argument("run_dir")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return report_command(args.run_dir)
        return run_command(args.command, args)
    except (CliError, ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
