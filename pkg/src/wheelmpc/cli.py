"""Command-line entry point: ``wheelmpc {plan,track,compare,bench}``.

Exit codes: 0 success, 2 configuration error, 3 solver/planner/simulation
failure, 4 file I/O error. Failures also print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .controllers import ControllerKind
from .io import read_trajectory, write_runlog, write_table, write_trajectory
from .planner import PlannerInfeasible, audit, plan_cycle
from .sim import SimulationAborted, bench_horizon_sweep, compare_controllers, logged_states, simulate

log = logging.getLogger("wheelmpc")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

COMPARE_COLUMNS = ["controller", "mean_abs_err_m", "max_err_m", "median_solve_ms", "mean_solve_ms",
                   "infeasible_count", "status"]
BENCH_COLUMNS = ["controller", "horizon", "samples", "mean_ms", "var_ms2", "median_ms", "failures"]

EPILOG = """\
output columns
  plan     leg1.csv, leg2.csv: k,t,x_r,y_r,x_f,y_f,theta,gamma,v,gamma_rate,frame,leg
  track    one row per control step; summary and timing in '#' footer lines
  compare  controller,mean_abs_err_m,max_err_m,median_solve_ms,mean_solve_ms,infeasible_count,status
  bench    controller,horizon,samples,mean_ms,var_ms2,median_ms,failures
"""


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _load_config(args):
    try:
        cfg = cfgmod.load(args.config) if args.config else cfgmod.RunConfig().validate()
    except cfgmod.ConfigError as exc:
        raise CliError(EXIT_CONFIG, "ConfigError", str(exc)) from exc
    except OSError as exc:
        raise CliError(EXIT_IO, "IOError", f"cannot read config: {exc}") from exc
    cfg = cfg.with_seed(args.seed)
    if args.print_config:
        sys.stdout.write(cfg.dumps())
    return cfg


def _read_legs(paths):
    try:
        return [read_trajectory(p) for p in paths]
    except OSError as exc:
        raise CliError(EXIT_IO, "IOError", f"cannot read trajectory: {exc}") from exc
    except (ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, "FormatError", f"bad trajectory file: {exc}") from exc


def _plan(cfg):
    try:
        return plan_cycle(cfg.scenario(), cfg.planner())
    except PlannerInfeasible as exc:
        raise CliError(EXIT_SOLVER, "PlannerInfeasible", str(exc)) from exc


def _guard_io(fn, *a):
    try:
        return fn(*a)
    except OSError as exc:
        raise CliError(EXIT_IO, "IOError", f"cannot write output: {exc}") from exc


def cmd_plan(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    _guard_io(lambda: out.mkdir(parents=True, exist_ok=True))
    scenario = cfg.scenario()
    legs = _plan(cfg)
    ends = [(scenario.loading_pose, scenario.unloading_pose), (scenario.unloading_pose, scenario.loading_pose)]
    for leg, (a, b) in zip(legs, ends):
        _guard_io(write_trajectory, out / f"leg{leg.leg}.csv", leg, cfg.params)
        report = audit(leg, scenario, a.as_array(), b.as_array())
        report = {"leg": leg.leg, "steps": len(leg) - 1, **report}
        print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _load_config(args)
    legs = _read_legs(args.trajectories)
    try:
        run = simulate(legs, args.controller, cfg.weights(), cfg.bounds(), cfg.disturbance(), cfg.params,
                       cfg.substeps, cfg.fallback_budget)
    except SimulationAborted as exc:
        _guard_io(write_runlog, args.out, exc.log, {"seed": cfg.raw["disturbance"]["rng_seed"]})
        raise CliError(EXIT_SOLVER, "SimulationAborted", str(exc)) from exc
    _guard_io(write_runlog, args.out, run, {"seed": cfg.raw["disturbance"]["rng_seed"]})
    print(json.dumps(run.summary(), sort_keys=True))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    legs = _read_legs(args.trajectories)
    rows = compare_controllers(legs, cfg.weights(), cfg.bounds(), cfg.disturbance(), cfg.params,
                               substeps=cfg.substeps)
    _guard_io(write_table, args.out, rows, COMPARE_COLUMNS)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    if all(r["status"] != "ok" for r in rows):
        raise CliError(EXIT_SOLVER, "AllRowsFailed", "every controller run failed")
    return EXIT_OK


def _parse_horizons(text):
    try:
        hs = [int(h) for h in text.split(",") if h.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"horizons must be comma-separated integers, got {text!r}") from exc
    if not hs or min(hs) < 1:
        raise argparse.ArgumentTypeError("horizons must be positive integers")
    return hs


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    legs = _read_legs(args.trajectories) if args.trajectories else _plan(cfg)
    try:
        ref = simulate(legs, ControllerKind.LPV, cfg.weights(), cfg.bounds(), cfg.disturbance(), cfg.params,
                       cfg.substeps, cfg.fallback_budget)
    except SimulationAborted as exc:
        ref = exc.log
    states = logged_states(ref, args.states)
    rows = bench_horizon_sweep(legs, states, args.horizons, args.repetitions, cfg.weights(), cfg.bounds(),
                               cfg.params)
    _guard_io(write_table, args.out, rows, BENCH_COLUMNS)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config; omitted sections use the built-in defaults")
    common.add_argument("--seed", type=int, help="override [disturbance] rng_seed")
    common.add_argument("--print-config", action="store_true", help="echo the effective config to stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="wheelmpc", description=__doc__.splitlines()[0], epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="plan both legs of the loading cycle")
    p.add_argument("--out", required=True, help="output directory for leg1.csv and leg2.csv")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("track", parents=[common], help="closed-loop tracking run")
    p.add_argument("trajectories", nargs="+", help="leg files in driving order")
    p.add_argument("--controller", choices=[k.value for k in ControllerKind], default="lpv")
    p.add_argument("--out", required=True, help="run log path")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("compare", parents=[common], help="NL vs LPV vs LTI on identical conditions")
    p.add_argument("trajectories", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bench", parents=[common], help="solve time versus horizon")
    p.add_argument("trajectories", nargs="*", help="leg files; planned from the config when omitted")
    p.add_argument("--horizons", type=_parse_horizons, default=[5, 10, 15, 20, 25])
    p.add_argument("--states", type=int, default=50, help="number of logged states")
    p.add_argument("--repetitions", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        sys.stderr.write(json.dumps({"error": exc.kind, "message": str(exc), "exit_code": exc.code}) + "\n")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
