"""Command line entry point.

Exit codes: 0 success, 1 a stage failed, 2 invalid configuration or
arguments, 3 a solver did not converge (outputs are still written).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .pipeline import (
    IncompatibleRuns,
    Run,
    RunManifest,
    compare,
    do_benchmark,
    do_bid,
    do_simulate,
    do_solve,
    do_sweep,
    format_table,
)
from .scenario import MODES

EXIT_OK, EXIT_FAILED, EXIT_INVALID, EXIT_NONCONVERGED = 0, 1, 2, 3

log = logging.getLogger("fphjb")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="scenario YAML (omit for the reference scenario)")
    common.add_argument("--mode", choices=MODES, help="solve mode (default from config)")
    common.add_argument("--seed", type=int, help="master seed for Monte Carlo and MPC")
    common.add_argument("--out", type=Path, help="output directory (default from config)")
    common.add_argument("--mesh-scale", type=float, default=1.0, help="scale node counts per axis")
    common.add_argument("--realizations", type=int, help="Monte Carlo paths (default from config)")
    common.add_argument("--allow-full3d", action="store_true", help="permit the unreduced 3-D solve")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="fphjb", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="run the coupled FP/HJB solver")
    sub.add_parser("simulate", parents=[common], help="solve, then Monte Carlo evaluate the feedback")
    sub.add_parser("bid", parents=[common], help="solve, then emit the hourly bid schedule")
    b = sub.add_parser("benchmark", parents=[common], help="rule-based controllers and stochastic MPC")
    b.add_argument("--no-mpc", action="store_true", help="skip the MPC controller")
    s = sub.add_parser("sweep", parents=[common], help="initial-penalty sweep (energy1d by default)")
    s.add_argument("--lam0", type=float, nargs="+", help="penalty values (default from config)")
    c = sub.add_parser("compare", help="tabulate two or more finished runs")
    c.add_argument("runs", nargs="+", type=Path, help="run directories or manifest files")
    return p


def _run(args) -> int:
    if args.command == "compare":
        try:
            rows, sweep = compare([RunManifest.load(r) for r in args.runs])
        except (IncompatibleRuns, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        print(format_table(rows, sweep))
        return EXIT_OK

    try:
        cfg = load_config(args.config)
        over = {}
        if args.seed is not None:
            over["benchmark.seed"] = args.seed
        if args.realizations is not None:
            over["benchmark.realizations"] = args.realizations
        if args.mode is not None:
            over["reduction.mode"] = args.mode
        if over:
            cfg = cfg.with_overrides(**over)
        if args.mesh_scale <= 0:
            raise ConfigError("must be positive", "--mesh-scale")
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID

    mode = cfg.mode
    if args.command == "sweep" and args.mode is None:
        mode = "energy1d"
    if mode == "full3d" and not (args.allow_full3d or cfg.data["reduction"]["allow_full3d"]):
        print("invalid configuration: full3d needs --allow-full3d (or reduction.allow_full3d: true)",
              file=sys.stderr)
        return EXIT_INVALID

    out = args.out or cfg.output_dir
    seed, reps = cfg.seed, cfg.realizations
    run = Run(cfg, out, args.command, mode if args.command != "benchmark" else None, seed)
    run.write("config.yaml", cfg.to_yaml().encode())

    if args.command in ("solve", "simulate", "bid"):
        sol = None
        with run.stage("solve"):
            sol = do_solve(run, mode, args.mesh_scale)
        if sol is not None and args.command == "simulate":
            with run.stage("simulate"):
                do_simulate(run, sol, reps, seed)
        if sol is not None and args.command == "bid":
            with run.stage("bid"):
                do_bid(run, sol)
    elif args.command == "benchmark":
        do_benchmark(run, reps, seed, with_mpc=not args.no_mpc)
    elif args.command == "sweep":
        do_sweep(run, args.lam0 or cfg.sweep_values(), args.mesh_scale, mode)

    manifest = run.finish()
    log.info("wrote %d files to %s", len(manifest.files), out)
    if manifest.failures:
        for stage, msg in manifest.failures.items():
            print(f"stage {stage} failed: {msg}", file=sys.stderr)
        return EXIT_FAILED
    if not manifest.converged:
        bad = [k for k, v in manifest.convergence.items() if not v]
        print(f"not converged: {', '.join(bad)}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * getattr(args, "verbose", 0)
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())
