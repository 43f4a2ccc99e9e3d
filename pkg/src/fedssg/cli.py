"""Command line entry point: ``python -m fedssg <verb> [--config F] [--preset P] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .core import ConfigError, ProtocolError, RngStream, save_dataset
from .datasynth import write_manifest
from .experiment import Pipeline, dump_config, load_config, report, run_experiment
from .fedengine import pretrain
from .generator import save_generator, train_generator
from .nn import save_params

VERBS = ("gen-data", "pretrain", "train-generator", "run", "report")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedssg", description=__doc__)
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--preset", default="", help="comma-separated preset names merged under the config")
    p.add_argument("--seed", type=int, help="run this seed only")
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _seed(cfg, args) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.verb == "report":
        out = args.out
        if out is None:
            if args.config is None and not args.preset:
                print("report needs --out or --config", file=sys.stderr)
                return 2
            try:
                out = Path(load_config(args.config, args.preset).output_dir)
            except ConfigError as exc:
                print(f"invalid config: {exc}", file=sys.stderr)
                return 2
        rep = report(out)
        print(rep.format())
        return 0 if rep.status != "no runs" else 1
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    try:
        cfg = load_config(args.config, args.preset, overrides)
    except (ConfigError, OSError) as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.output_dir)
    seed = _seed(cfg, args)
    try:
        if args.verb == "run":
            run_experiment(cfg, out)
            print(report(out).format())
            return 0
        pipe = Pipeline()
        private, public = pipe.benchmark(cfg.benchmark, seed)
        out.mkdir(parents=True, exist_ok=True)
        if args.verb == "gen-data":
            save_dataset(private, out / f"private-seed{seed}.jsonl")
            save_dataset(public, out / f"public-seed{seed}.jsonl")
            write_manifest(cfg.benchmark, seed, private, public, out / f"benchmark-seed{seed}.json")
            (out / "config.yaml").write_text(dump_config(cfg))
        elif args.verb == "pretrain":
            topo = cfg.model.topology(cfg.benchmark.dim, cfg.benchmark.n_classes)
            res = pretrain(public, topo, cfg.pretrain, RngStream(seed).child("pretrain"))
            save_params(res.params, out / f"theta0-seed{seed}.txt",
                        {"best_epoch": res.best_epoch, "val_losses": res.val_losses})
        elif args.verb == "train-generator":
            model = train_generator(public, cfg.generator, RngStream(seed).child("generator"))
            save_generator(model, out / f"generator-seed{seed}.txt")
            print(model.checksum())
    except (ConfigError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
