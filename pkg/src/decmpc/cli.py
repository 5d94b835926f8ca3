"""Command-line entry point.

Subcommands
-----------
run             simulate a scenario in either mode and write the CSV log
compare         compare two logs of the same scenario
timing-profile  bucket one agent's solve times by active-constraint count

Exit codes: 0 success, 2 invalid scenario or arguments, 3 infeasible or
non-converging initialization, 4 solver divergence mid-run, 5 I/O
failure, 6 mismatched comparison inputs, 7 wrong log kind for the
requested analysis.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .bench import compare, run, timing_profile, timing_profile_csv
from .errors import (
    DecmpcError,
    InitializationError,
    NewtonConvergenceError,
    ScenarioValidationError,
)

EXIT_OK = 0
EXIT_BAD_SCENARIO = 2
EXIT_INIT_FAILED = 3
EXIT_SOLVER_DIVERGED = 4
EXIT_IO = 5
EXIT_MISMATCH = 6
EXIT_WRONG_LOG = 7

WORKERS_ENV = "DECMPC_WORKERS"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="decmpc",
        description="Decentralized continuation/GMRES MPC benchmark",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario")
    p_run.add_argument("--scenario", required=True, help="scenario YAML path")
    p_run.add_argument("--mode", required=True,
                       choices=["centralized", "decentralized"])
    p_run.add_argument("--out", required=True, help="CSV log output path")
    p_run.add_argument("--duration", type=float, default=None,
                       help="override the scenario duration [s]")
    p_run.add_argument("--workers", type=int, default=None,
                       help=f"parallel agent solves (env {WORKERS_ENV})")
    p_run.add_argument("--seed", type=int, default=0,
                       help="recorded in the log header; runs are "
                            "deterministic regardless")
    p_run.add_argument("--emit-plots", default=None, metavar="DIR",
                       help="write plot-ready CSV series into DIR")
    p_run.add_argument("--transcript", default=None, metavar="PATH",
                       help="decentralized only: dump the binary message "
                            "transcript")

    p_cmp = sub.add_parser("compare", help="compare two run logs")
    p_cmp.add_argument("log_a")
    p_cmp.add_argument("log_b")
    p_cmp.add_argument("--out", default=None, help="report JSON path")
    p_cmp.add_argument("--emit-plots", default=None, metavar="DIR",
                       help="write the lateral-difference series into DIR")

    p_tp = sub.add_parser("timing-profile", help="wall-time zones per agent")
    p_tp.add_argument("log")
    p_tp.add_argument("--agent", type=int, default=0)
    p_tp.add_argument("--out", default=None, help="table CSV path")
    return parser


def _cmd_run(args) -> int:
    workers = args.workers
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    try:
        log = run(
            args.scenario,
            mode=args.mode,
            out=args.out,
            duration=args.duration,
            workers=workers,
            seed=args.seed,
            emit_plots=args.emit_plots,
            transcript=args.transcript,
        )
    except ScenarioValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_SCENARIO
    except (InitializationError, NewtonConvergenceError) as exc:
        print(f"error: initialization failed: {exc}", file=sys.stderr)
        return EXIT_INIT_FAILED
    except DecmpcError as exc:
        print(f"error: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER_DIVERGED
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    print(
        f"wrote {args.out}: {log.mode} run of '{log.config['name']}' "
        f"({log.time.size} samples, scenario {log.scenario_hash})"
    )
    return EXIT_OK


def _cmd_compare(args) -> int:
    try:
        report = compare(args.log_a, args.log_b)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DecmpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    print(json.dumps(report.to_dict(), indent=2))
    if args.out:
        report.write_json(args.out)
    if args.emit_plots:
        from .logs import TrajectoryLog
        from .bench import lateral_difference_series
        log_a = TrajectoryLog.read_csv(args.log_a)
        log_b = TrajectoryLog.read_csv(args.log_b)
        series = lateral_difference_series(log_a, log_b)
        out_dir = Path(args.emit_plots)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = ["time,max_lateral_difference"]
        lines += [
            f"{t!r},{d!r}" for t, d in zip(log_a.time.tolist(), series.tolist())
        ]
        (out_dir / "lateral_difference.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_timing_profile(args) -> int:
    try:
        table = timing_profile(args.log, agent=args.agent)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DecmpcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WRONG_LOG
    text = timing_profile_csv(table)
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "compare":
        return _cmd_compare(args)
    return _cmd_timing_profile(args)


if __name__ == "__main__":
    sys.exit(main())
