"""FedAvg vs FedSSG at desk scale: per-seed, per-domain accuracy differences.

    python scripts/desk_gain.py --seeds 0 1 2 3 4
"""
import argparse
import time

import numpy as np

from fedssg.experiment import Pipeline, desk_config, run_one


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--local-lr", type=float, default=None)
    ap.add_argument("--rounds", type=int, default=None)
    args = ap.parse_args()
    fed = {k: v for k, v in (("local_lr", args.local_lr), ("rounds", args.rounds)) if v is not None}
    cfg = desk_config(seeds=args.seeds, federation=fed)
    domains = cfg.benchmark.domain_names
    pipe = Pipeline()
    finals: dict[str, list] = {}
    t0 = time.perf_counter()
    for seed in args.seeds:
        row = {}
        for name, rc in cfg.runs():
            row[name] = run_one(name, rc, seed, pipe).final
            finals.setdefault(name, []).append(row[name])
        diff = {d: 100 * (row["fedssg"][f"acc_{d}"] - row["fedavg"][f"acc_{d}"]) for d in (*domains, "Avg")}
        print(f"seed {seed}: " + "  ".join(f"{d} {v:+5.1f}" for d, v in diff.items()))
    for name, rows in finals.items():
        means = {d: 100 * np.mean([r[f"acc_{d}"] for r in rows]) for d in (*domains, "Avg")}
        print(f"{name:>8}: " + "  ".join(f"{d} {v:5.1f}" for d, v in means.items()))
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
