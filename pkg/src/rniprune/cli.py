"""Command-line driver: ``rniprune {train,prune,finetune,eval,report}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .checkpoint import CheckpointError
from .config import ConfigError
from .data import DataError
from .experiment import (ExperimentContext, run_eval, run_finetune, run_prune, run_train)
from .gradcheck import NonFiniteError
from .pruning import GLOBAL, UNIFORM, PlanError
from .reports import ReportError, build_report
from .training import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("rniprune")


def _ctx(args) -> Optional[ExperimentContext]:
    return ExperimentContext.from_file(args.config) if args.config else None


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigError("train needs --config")
    ctx = _ctx(args)
    seeds = [args.seed] if args.seed is not None else list(ctx.config.seeds)
    for seed in seeds:
        path = run_train(ctx, seed, args.out)
        print(path)
    return EXIT_OK


def _need_checkpoint(args) -> Path:
    if not args.checkpoint:
        raise ConfigError(f"{args.command} needs --checkpoint")
    return Path(args.checkpoint)


def cmd_prune(args) -> int:
    ckpt = _need_checkpoint(args)
    if args.ratio is None:
        raise ConfigError("prune needs --ratio", field="ratio")
    print(run_prune(ckpt, args.ratio, args.policy, args.out, _ctx(args)))
    return EXIT_OK


def cmd_finetune(args) -> int:
    path, acc = run_finetune(_need_checkpoint(args), args.out, _ctx(args))
    print(f"{path} acc={acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    acc = run_eval(_need_checkpoint(args), _ctx(args))
    print(f"acc={acc:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = args.out
    if root is None and args.config:
        root = _ctx(args).config.out_dir
    if root is None:
        raise ConfigError("report needs --out or --config")
    for name, path in build_report(root).items():
        print(f"{name}: {path}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "finetune": cmd_finetune,
            "eval": cmd_eval, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rniprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config file")
        p.add_argument("--checkpoint", help="checkpoint to operate on")
        p.add_argument("--ratio", type=float, help="fraction of prunable filters to remove")
        p.add_argument("--policy", choices=(GLOBAL, UNIFORM))
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="results root directory")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PlanError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, ReportError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
