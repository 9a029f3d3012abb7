"""Command line entry point: ``ar2vp run|sweep|eval``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment
from .config import PRESETS, SWEEP_AXES, ConfigError, ExperimentConfig, apply_overrides, load_config, preset


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or "smoke")
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"{item}: expected KEY=VALUE")
        key, value = item.split("=", 1)
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["seeds"] = [args.seed]
    return apply_overrides(cfg, overrides) if overrides else cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--preset", choices=PRESETS)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default="runs/out", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, value parsed as JSON (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="ar2vp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="run the configured experiment")
    sp = sub.add_parser("sweep", parents=[common], help="sweep one config axis")
    sp.add_argument("--axis", choices=SWEEP_AXES)
    sp.add_argument("--values", help="comma-separated values")
    ep = sub.add_parser("eval", parents=[common], help="re-evaluate a checkpoint")
    ep.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "run":
            experiment.run(cfg, args.out)
        elif args.command == "sweep":
            values = [_parse_value(v) for v in args.values.split(",")] if args.values else None
            experiment.run_sweep(cfg, args.out, args.axis, values)
        else:
            experiment.run_eval(cfg, args.checkpoint, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote results to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
