import argparse
import os
import sys
from typing import List, Optional

from fcs_mpc.models.controller import ControlError
from fcs_mpc.simulation import SimulationError, run
from fcs_mpc.utils import data_utils
from fcs_mpc.utils.evaluation import evaluate_run, plot_trace
from fcs_mpc.utils.qpcore import QpError
from fcs_mpc.utils.scenario import (ScenarioError, apply_overrides,
                                    load_scenario, write_logs)
from fcs_mpc.utils.sweep import SWEEP_PARAMS, sweep
from fcs_mpc.utils.utils import parse_values, printer


def simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    scenario = apply_overrides(scenario, mode=args.mode, delta=args.delta,
                               e=args.e)
    logs = run(scenario, verbose=args.verbose)
    paths = write_logs(logs, args.out, scenario=scenario)
    evaluate_run(logs, verbose=args.verbose)
    print(f"Wrote {len(logs)} steps to {args.out}")
    for p in paths:
        printer(f"  {p}", args.verbose)
    return 0


def run_sweep(args) -> int:
    scenario = load_scenario(args.scenario)
    scenario = apply_overrides(scenario, mode=args.mode)
    try:
        values = parse_values(args.values)
    except ValueError as e:
        raise ScenarioError([f"--values: {e}"])
    out_dirs = sweep(scenario, args.param, values, args.out,
                     workers=args.workers, verbose=args.verbose)
    print(f"Wrote {len(out_dirs)} runs to {args.out}")
    return 0


def validate(args) -> int:
    scenario = load_scenario(args.scenario)
    print(f"OK: {scenario.name} ({scenario.mode.value}, "
          f"{len(scenario.fleet)} vehicles, {scenario.n_steps} steps)")
    return 0


def plot(args) -> int:
    trace = data_utils.read_trace(args.run)
    out_dir = args.out if args.out else (
        args.run if os.path.isdir(args.run) else os.path.dirname(args.run))
    paths = plot_trace(trace, out_dir)
    print(f"Wrote {len(paths)} figures to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Two-step control of an EV fast-charging station")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Run one scenario")
    p.add_argument("-s", "--scenario", required=True, type=str)
    p.add_argument("-o", "--out", required=True, type=str)
    p.add_argument("-m", "--mode", type=str, choices=["standalone", "grid"])
    p.add_argument("--delta", type=float)
    p.add_argument("--e", type=float)
    p.add_argument("--seed", type=int, default=0,
                   help="Accepted for reproducible scripts, runs are "
                        "deterministic")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=simulate)

    p = sub.add_parser("sweep", help="Run a scenario for several values of "
                                     "one parameter")
    p.add_argument("-s", "--scenario", required=True, type=str)
    p.add_argument("-o", "--out", required=True, type=str)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, type=str,
                   help="Comma separated, e.g. 10,5e6")
    p.add_argument("-m", "--mode", type=str, choices=["standalone", "grid"])
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=run_sweep)

    p = sub.add_parser("validate", help="Check a scenario file")
    p.add_argument("scenario_pos", nargs="?", metavar="SCENARIO")
    p.add_argument("-s", "--scenario", type=str)
    p.set_defaults(func=validate)

    p = sub.add_parser("plot", help="Render figures from a written run")
    p.add_argument("-r", "--run", required=True, type=str,
                   help="Run directory or trace.csv")
    p.add_argument("-o", "--out", type=str)
    p.set_defaults(func=plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "validate":
        args.scenario = args.scenario or args.scenario_pos
        if args.scenario is None:
            parser.error("validate: a scenario file is required")
    try:
        return args.func(args)
    except ScenarioError as e:
        print("error: invalid scenario", file=sys.stderr)
        for msg in e.errors:
            print(f"  {msg}", file=sys.stderr)
    except (ControlError, SimulationError, QpError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
