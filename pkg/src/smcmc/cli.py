"""Command-line experiment runner."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import parse_config, validate_config
from .errors import ConfigError, ContractViolation
from .runner import run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smcmc",
        description="Run a sequential MCMC filtering experiment described by a config file.",
    )
    parser.add_argument("--config", required=True, help="path to the config document")
    parser.add_argument(
        "--algo",
        choices=["smcmc", "as-smcmc", "ep-smcmc"],
        help="override the config's algorithm selector",
    )
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--runs", type=int, help="override the replication count")
    parser.add_argument("--out", default="out", help="output directory (default: ./out)")
    parser.add_argument(
        "--emit-summary", action="store_true", help="also write summary.json"
    )
    parser.add_argument(
        "--wall-clock",
        action="store_true",
        help="record wall time per step (breaks byte-identical reruns)",
    )
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(Path(args.config).read_text())
        if args.algo is not None:
            cfg.algo = args.algo.replace("-", "_")
        if args.seed is not None:
            cfg.seed = args.seed
        if args.runs is not None:
            cfg.runs = args.runs
        validate_config(cfg)
        progress = None if args.quiet else lambda msg: print(msg, file=sys.stderr)
        return run_experiment(
            cfg,
            args.out,
            emit_summary=args.emit_summary,
            wall_clock=args.wall_clock,
            progress=progress,
        )
    except (ConfigError, ContractViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
