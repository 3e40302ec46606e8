"""Command-line interface.

Subcommands map one-to-one onto pipeline stages; stages communicate only
through files in the run directory. Exit codes: 0 on success, 1 on a
contract or numeric failure, 2 on a usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import checks, config, pipeline
from .errors import ContractError

logger = logging.getLogger("rankdistill")

STAGES = {
    "generate-data": pipeline.stage_generate_data,
    "train-id": pipeline.stage_train_id,
    "mine-negatives": pipeline.stage_mine_negatives,
    "train-cascade": pipeline.stage_train_cascade,
    "eval": pipeline.stage_eval,
    "retrieve": pipeline.stage_retrieve,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rankdistill",
        description="Train and evaluate distilled dense retrievers on synthetic corpora.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*STAGES, "gradcheck"]:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", help="path to a run config file")
        cmd.add_argument("--seed", type=int, help="override the config seed")
        cmd.add_argument("--out", help="override the output directory")
        cmd.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


def _load_config(args) -> config.RunConfig:
    cfg = config.load(args.config) if args.config else config.RunConfig()
    return config.with_overrides(cfg, seed=args.seed, out_dir=args.out)


def run_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = checks.run_all(seed)
    failed = False
    for name, err in results:
        status = "ok" if err < checks.TOLERANCE else "FAIL"
        failed = failed or err >= checks.TOLERANCE
        if not args.quiet or status == "FAIL":
            print(f"{name:40s} {err:.3e} {status}")
    print(f"gradcheck: {'FAIL' if failed else 'pass'} ({len(results)} checks)")
    return 1 if failed else 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "gradcheck":
            return run_gradcheck(args)
        cfg = _load_config(args)
        result = STAGES[args.command](cfg)
        if not args.quiet:
            print(result)
        return 0
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
