"""Command line entry point.

    pdebayes solve --config PATH [--seed S] [--chains M] [--samples N]
                   [--method NAME] [--output DIR]

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import METHODS, ConfigError, ExperimentConfig, load_config
from .driver import StageError, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdebayes",
        description="Bayesian inversion for PDE models with geometry-aware MCMC")
    sub = parser.add_subparsers(dest="command", required=True)
    solve = sub.add_parser("solve", help="run the full inversion pipeline")
    solve.add_argument("--config", help="path to the experiment configuration")
    solve.add_argument("--seed", type=int, help="override mcmc.seed")
    solve.add_argument("--chains", type=int, help="override mcmc.chains")
    solve.add_argument("--samples", type=int, help="override mcmc.samples")
    solve.add_argument("--method", choices=METHODS, help="override mcmc.method")
    solve.add_argument("--output", help="override output.dir")
    solve.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg.mcmc_seed = args.seed
        if args.chains is not None:
            if args.chains < 1:
                raise ConfigError("--chains must be positive")
            cfg.mcmc_chains = args.chains
        if args.samples is not None:
            if args.samples < 1:
                raise ConfigError("--samples must be positive")
            cfg.mcmc_samples = args.samples
        if args.method is not None:
            cfg.mcmc_method = args.method
        if args.output is not None:
            cfg.output_dir = args.output
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        entries = run_experiment(cfg)
    except StageError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"report written to {cfg.output_dir}/report.txt "
          f"(mpsrf={entries['mpsrf']:.4g}, ess_avg={entries['ess_avg']:.4g})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
