"""Command-line entry point: ``comatch train|gradcheck|oracle|eval``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import InvalidArgumentError, NumericError, ParseError
from .experiment import ExperimentConfig, run_eval, run_gradcheck, run_oracle, run_train


def _load_config(path: str | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig()


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.dump_graphs:
        overrides["dump_graphs"] = True
    if overrides:
        cfg = cfg.replace(**overrides)
    result = run_train(cfg)
    print(json.dumps(result.summary, indent=2))
    return 0


def _cmd_gradcheck(args) -> int:
    report = run_gradcheck(_load_config(args.config))
    print("\n".join(report.lines()))
    return 0 if report.passed else 1


def _cmd_oracle(args) -> int:
    report = run_oracle(args.subject, args.instance)
    print("\n".join(report.lines()))
    return 0


def _cmd_eval(args) -> int:
    print(json.dumps(run_eval(args.checkpoint, args.data), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comatch", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON config")
    p.add_argument("--config", help="JSON config; defaults apply to missing keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--dump-graphs", action="store_true", help="write W^q / W^z CSVs per metrics row")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("gradcheck", help="compare backward with finite differences")
    p.add_argument("--config")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("oracle", help="compare engine output with direct formulas")
    p.add_argument("--subject", required=True, choices=("pseudolabel", "graph", "loss"))
    p.add_argument("--instance", required=True, help="JSON instance file")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("COMATCH_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InvalidArgumentError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
