"""Run the ablation experiment preset and print the result table.

Usage: python scripts/run_ablation.py [--out DIR] [--seeds 1 2 3] [--set KEY=VALUE ...]
"""
import argparse
import logging
from pathlib import Path

from ar2vp import experiment
from ar2vp.cli import _parse_value
from ar2vp.config import apply_overrides, preset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    overrides = dict(item.split("=", 1) for item in args.set)
    overrides = {k: _parse_value(v) for k, v in overrides.items()}
    if args.seeds:
        overrides["seeds"] = args.seeds
    cfg = apply_overrides(preset("ablation"), overrides)
    experiment.run(cfg, args.out)
    for csv_path in sorted(Path(args.out).glob("*.csv")):
        print(f"== {csv_path}")
        print(csv_path.read_text())


if __name__ == "__main__":
    main()
