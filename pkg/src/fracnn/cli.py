"""Command-line entry point for the batch pipeline."""

from __future__ import annotations

import argparse
import logging
import sys

from .core import IngestionError
from .pipeline import STAGES, RunConfig, StageError, run_pipeline


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fracnn",
        description="Nearest-neighbor fractional imputation with replicate variance estimation.",
    )
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--stage", default="all", choices=("all",) + STAGES, help="run one stage from checkpoints, or all")
    p.add_argument("--threads", type=int, default=None, help="worker threads for per-item work")
    p.add_argument("--seed-override", type=int, default=None, help="replace the configured seed")
    p.add_argument("--dump-replicates", metavar="DIR", default=None,
                   help="write replicate weights and replicate fractions to DIR")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.from_yaml(args.config)
        if args.threads is not None:
            cfg.threads = args.threads
        if args.seed_override is not None:
            cfg.seed = args.seed_override
            if cfg.synthetic is not None:
                cfg.synthetic = {**cfg.synthetic, "seed": args.seed_override}
    except (IngestionError, ValueError, TypeError) as exc:
        print(f"fracnn: config error: {exc}", file=sys.stderr)
        return 2
    try:
        out = run_pipeline(cfg, args.stage, args.dump_replicates)
    except StageError as exc:
        print(f"fracnn: {exc}", file=sys.stderr)
        return 1
    for r in out.reports:
        logging.info("%s = %.6g (naive SE %.6g, imputation SE %.6g)", r.parameter, r.estimate, r.naive_se, r.imputation_se)
    return 0


if __name__ == "__main__":
    sys.exit(main())
