"""Run a preset grid (desk-scale settings by default) and print the summary.

    python scripts/run_grid.py --preset table2 --seeds 0 1 2 --out runs/table2
"""
import argparse
import logging
from pathlib import Path

from fedssg.experiment import DESK, deep_merge, parse_config, preset_fragment, run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--full-scale", action="store_true", help="skip the desk-scale overrides")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    data = {} if args.full_scale else DESK
    data = deep_merge(data, preset_fragment(args.preset))
    cfg = parse_config(deep_merge(data, {"seeds": args.seeds, "output_dir": args.out}))
    run_experiment(cfg)
    print((Path(args.out) / "summary.txt").read_text())


if __name__ == "__main__":
    main()
