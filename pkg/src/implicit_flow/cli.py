"""Command line entry point.

``implicit-flow <kind> --config run.toml [--out DIR] [--threads N] [--seed S]``

Exit status is 0 on success, 2 for configuration errors and 3 when the
evolution diverges (partial artifacts are kept).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import KINDS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="implicit-flow",
        description="Evolve neural implicit surfaces under explicit flows.")
    parser.add_argument("kind", choices=KINDS, help="experiment to run")
    parser.add_argument("--config", required=True, help="TOML experiment file")
    parser.add_argument("--out", help="output directory (overrides io.out)")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 (the default) gives bitwise reproducible runs")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    # must happen before numpy loads its BLAS
    for var in _THREAD_VARS:
        os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .config import ConfigError, load_config
    from .evolution import DivergenceError
    from .experiments import run

    try:
        cfg = load_config(args.config, args.kind)
    except ConfigError as exc:
        print(f"config error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or cfg.io.out
    try:
        metrics = run(cfg, out)
    except DivergenceError as exc:
        print(f"diverged: {exc}; partial results in {out}", file=sys.stderr)
        return EXIT_DIVERGED
    except FloatingPointError as exc:
        print(f"diverged: {exc}; partial results in {out}", file=sys.stderr)
        return EXIT_DIVERGED
    summary = {k: v for k, v in metrics.items() if not isinstance(v, (list, dict))}
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
