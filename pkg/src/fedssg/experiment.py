"""Experiment configuration, presets and the end-to-end pipeline.

A config file is YAML with one mapping per section (``benchmark``,
``model``, ``pretrain``, ``generator``, ``allocator``, ``federation``) plus
``seeds``, ``output_dir`` and an optional ``grid``: a list of named runs,
each a partial override of the sections. Presets are fragments merged over
the defaults before the file itself.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import statistics
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .allocator import AllocatorConfig, plan_dump
from .core import ConfigError, RngStream, checksum, load_dataset, save_dataset
from .datasynth import (FULL_PRIVATE_COUNTS, FULL_PUBLIC_COUNTS, BenchmarkSpec, generate_benchmark, make_federated_split,
                        write_manifest)
from .fedengine import (FederationConfig, ModelConfig, PretrainConfig, pretrain, run_federation)
from .generator import GeneratorConfig, load_generator, save_generator, train_generator
from .metrics import metric_columns, rows_to_csv
from .nn import load_params, save_params

log = logging.getLogger(__name__)

SECTIONS = {
    "benchmark": BenchmarkSpec,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "generator": GeneratorConfig,
    "allocator": AllocatorConfig,
    "federation": FederationConfig,
}
TOP_LEVEL = set(SECTIONS) | {"seeds", "output_dir", "grid", "cache_dir"}


@dataclass(frozen=True)
class RunSpec:
    name: str
    overrides: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    allocator: AllocatorConfig = field(default_factory=AllocatorConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    seeds: tuple = (0,)
    output_dir: str = "runs"
    cache_dir: str | None = None
    grid: tuple = ()

    def to_dict(self) -> dict:
        out = {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}
        out["seeds"] = list(self.seeds)
        out["output_dir"] = self.output_dir
        out["cache_dir"] = self.cache_dir
        out["grid"] = [{"name": r.name, **_plain(r.overrides)} for r in self.grid]
        return out

    def runs(self) -> list[tuple[str, "ExperimentConfig"]]:
        """Concrete (name, config) pairs; a config without a grid is one run."""
        if not self.grid:
            return [(self.federation.label, self)]
        base = self.to_dict()
        base["grid"] = []
        out = []
        for r in self.grid:
            merged = deep_merge(base, r.overrides)
            out.append((r.name, parse_config(merged)))
        return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _build_section(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**data)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(data: dict) -> ExperimentConfig:
    """Validate a nested mapping into an :class:`ExperimentConfig`."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    unknown = sorted(set(data) - TOP_LEVEL)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kwargs = {name: _build_section(cls, data.get(name), name) for name, cls in SECTIONS.items()}
    seeds = data.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds: expected a non-empty list of non-negative integers")
    grid = []
    for i, entry in enumerate(data.get("grid") or []):
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"grid[{i}]: each run needs a 'name'")
        over = {k: v for k, v in entry.items() if k != "name"}
        bad = sorted(set(over) - set(SECTIONS))
        if bad:
            raise ConfigError(f"grid[{i}]: unknown key(s) {', '.join(bad)}")
        for sec, vals in over.items():
            # validate early so a typo fails before any work starts
            base = dataclasses.asdict(kwargs[sec])
            _build_section(SECTIONS[sec], {**base, **vals}, f"grid[{i}].{sec}")
        grid.append(RunSpec(str(entry["name"]), over))
    names = [r.name for r in grid]
    if len(set(names)) != len(names):
        raise ConfigError("grid: run names must be unique")
    return ExperimentConfig(seeds=tuple(seeds), output_dir=str(data.get("output_dir", "runs")),
                            cache_dir=data.get("cache_dir"), grid=tuple(grid), **kwargs)


# -- presets -----------------------------------------------------------------------

def _strategy_runs(pretraining: bool) -> list[dict]:
    suffix = "" if pretraining else "-scratch"
    base = {"use_pretraining": pretraining}
    return [
        {"name": f"fedavg{suffix}", "federation": {**base, "strategy": "fedavg"}},
        {"name": f"moon{suffix}", "federation": {**base, "strategy": "moon"}},
        {"name": f"fedprox{suffix}", "federation": {**base, "strategy": "fedprox"}},
        {"name": f"fedssg{suffix}", "federation": {**base, "strategy": "fedavg", "use_synthetic": True}},
    ]


# Desk-scale protocol: the federation shape is shrunk (20 clients, 40 rounds)
# and optimizer/generator budgets are raised so a CPU run finishes in seconds.
DESK = {
    "federation": {"K": 20, "active_per_round": 6, "rounds": 40, "local_lr": 1e-3, "eval_interval": 5},
    "pretrain": {"trunk_lr": 1e-3, "head_lr": 3e-3},
    "generator": {"T": 128, "epochs": 300, "hidden": [128, 128]},
}

PRESETS: dict[str, dict] = {
    "desk": {**DESK, "grid": [
        {"name": "fedavg", "federation": {"strategy": "fedavg"}},
        {"name": "fedssg", "federation": {"strategy": "fedavg", "use_synthetic": True}},
    ]},
    "table2": {"grid": _strategy_runs(False) + _strategy_runs(True)},
    "table4": {"grid": [
        {"name": f"S{'-'.join(str(int(x)) for x in s)}",
         "federation": {"use_synthetic": True},
         "allocator": {"domain_scales": list(s), "allow_scale_override": s == (50, 50, 50)}}
        for s in ((50, 50, 50), (10, 25, 40), (20, 50, 80), (40, 100, 160))
    ]},
    "clients": {"grid": [
        {"name": f"K{k}-{name}", "federation": {"K": k, "active_per_round": 6, **fed}}
        for k in (70, 85, 100)
        for name, fed in (("fedavg", {}), ("fedssg", {"use_synthetic": True}))
    ] + [
        {"name": f"active{a}-{name}", "federation": {"K": 85, "active_per_round": a, **fed}}
        for a in (4, 8)
        for name, fed in (("fedavg", {}), ("fedssg", {"use_synthetic": True}))
    ]},
    "longer": {"grid": [
        {"name": "fedssg-300", "federation": {"rounds": 300, "use_synthetic": True}},
    ]},
    "full": {
        "benchmark": {"class_counts_per_domain": [list(r) for r in FULL_PRIVATE_COUNTS],
                      "public_class_counts": list(FULL_PUBLIC_COUNTS)},
        "federation": {"K": 85, "clients_per_domain": [56, 24, 5]},
    },
}


def preset_fragment(names) -> dict:
    if isinstance(names, str):
        names = [n for n in names.split(",") if n]
    frag: dict = {}
    for n in names:
        if n not in PRESETS:
            raise ConfigError(f"unknown preset {n!r}; choose from {', '.join(sorted(PRESETS))}")
        frag = deep_merge(frag, PRESETS[n])
    return frag


def load_config(path: str | Path | None = None, presets=(), overrides: dict | None = None) -> ExperimentConfig:
    data: dict = {}
    data = deep_merge(data, preset_fragment(presets))
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        presets_in_file = loaded.pop("presets", None)
        if presets_in_file:
            data = deep_merge(preset_fragment(presets_in_file), data)
        data = deep_merge(data, loaded)
    if overrides:
        data = deep_merge(data, overrides)
    return parse_config(data)


def desk_config(**overrides) -> ExperimentConfig:
    return parse_config(deep_merge(preset_fragment("desk"), overrides))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


# -- pipeline ------------------------------------------------------------------------

def _hash(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True, default=str).encode() if not isinstance(p, str) else p.encode())
    return h.hexdigest()[:16]


@dataclass
class Pipeline:
    """Stages shared by every run of a seed, memoized in memory and on disk."""

    cache_dir: Path | None = None
    _mem: dict = field(default_factory=dict)

    def _disk(self, kind: str, key: str, suffix: str) -> Path | None:
        if self.cache_dir is None:
            return None
        return Path(self.cache_dir) / f"{kind}-{key}{suffix}"

    def benchmark(self, spec: BenchmarkSpec, seed: int):
        key = ("benchmark", _hash(spec.to_dict(), seed))
        if key not in self._mem:
            priv_p = self._disk("private", key[1], ".jsonl")
            pub_p = self._disk("public", key[1], ".jsonl")
            if priv_p is not None and priv_p.exists() and pub_p.exists():
                self._mem[key] = (load_dataset(priv_p), load_dataset(pub_p))
            else:
                self._mem[key] = generate_benchmark(spec, RngStream(seed).child("benchmark"))
                if priv_p is not None:
                    save_dataset(self._mem[key][0], priv_p)
                    save_dataset(self._mem[key][1], pub_p)
        return self._mem[key]

    def pretrained(self, cfg: ExperimentConfig, seed: int, public, enabled: bool):
        topo = cfg.model.topology(cfg.benchmark.dim, cfg.benchmark.n_classes)
        key = ("theta0", _hash(public.content_hash(), topo.to_dict(), dataclasses.asdict(cfg.pretrain), seed, enabled))
        if key not in self._mem:
            path = self._disk("theta0", key[1], ".txt")
            if path is not None and path.exists():
                self._mem[key] = load_params(path)[0]
            else:
                res = pretrain(public, topo, cfg.pretrain, RngStream(seed).child("pretrain"), enabled=enabled)
                self._mem[key] = res.params
                if path is not None:
                    save_params(res.params, path)
        return self._mem[key]

    def generator(self, cfg: ExperimentConfig, seed: int, public):
        key = ("generator", _hash(public.content_hash(), cfg.generator.to_dict(), seed))
        if key not in self._mem:
            path = self._disk("generator", key[1], ".txt")
            if path is not None and path.exists():
                self._mem[key] = load_generator(path)
            else:
                self._mem[key] = train_generator(public, cfg.generator, RngStream(seed).child("generator"))
                if path is not None:
                    save_generator(self._mem[key], path)
        return self._mem[key]


@dataclass
class RunOutput:
    name: str
    seed: int
    history: list
    final: dict
    result: Any
    elapsed: float


def run_one(name: str, cfg: ExperimentConfig, seed: int, pipe: Pipeline | None = None,
            workers: int | None = None) -> RunOutput:
    pipe = pipe or Pipeline()
    t0 = time.perf_counter()
    fed = cfg.federation
    private, public = pipe.benchmark(cfg.benchmark, seed)
    split = make_federated_split(private, fed.K, fed.dirichlet_alpha, RngStream(seed).child("split"),
                                 cfg.benchmark.test_fraction, cfg.benchmark.val_fraction,
                                 fed.clients_per_domain, fed.min_client_size)
    theta0 = pipe.pretrained(cfg, seed, public, fed.use_pretraining)
    gen = pipe.generator(cfg, seed, public) if fed.use_synthetic else None
    result = run_federation(split, theta0, fed, RngStream(seed).child("federation"), generator=gen,
                            alloc=cfg.allocator, domain_names=cfg.benchmark.domain_names, workers=workers)
    history = [{"round": h["round"], "strategy": name, "seed": seed, **{k: v for k, v in h.items() if k != "round"}}
               for h in result.history]
    return RunOutput(name, seed, history, history[-1], result, time.perf_counter() - t0)


def history_columns(domain_names) -> list[str]:
    return ["round", "strategy", "seed"] + metric_columns(domain_names)


def _git_stamp() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, workers: int | None = None,
                   save_models: bool = True) -> list[RunOutput]:
    """Every (run, seed) pair of ``cfg``; each run's files are complete on disk
    before the next one starts."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = cfg.runs()
    manifest = {
        "version": __version__,
        "git": _git_stamp(),
        "config": cfg.to_dict(),
        "expected_runs": [f"{name}__seed{seed}" for name, _ in runs for seed in cfg.seeds],
    }
    _atomic_write(out / "manifest.yaml", yaml.safe_dump(manifest, sort_keys=True))
    pipe = Pipeline(Path(cfg.cache_dir) if cfg.cache_dir else out / "cache")
    cols = history_columns(cfg.benchmark.domain_names)
    outputs = []
    for seed in cfg.seeds:
        for name, rcfg in runs:
            tag = f"{name}__seed{seed}"
            log.info("run %s", tag)
            res = run_one(name, rcfg, seed, pipe, workers)
            outputs.append(res)
            run_dir = out / "runs"
            if save_models:
                save_params(res.result.params, run_dir / f"{tag}.model.txt")
            _atomic_write(run_dir / f"{tag}.rounds.jsonl",
                          "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in res.result.rounds))
            if res.result.plans:
                _atomic_write(run_dir / f"{tag}.plans.jsonl",
                              "".join(plan_dump(k, inp, plan) + "\n"
                                      for k, (inp, plan) in sorted(res.result.plans.items())))
            # the history CSV goes last: its presence marks the run complete
            _atomic_write(run_dir / f"{tag}.csv", rows_to_csv(res.history, cols))
    report(out)
    return outputs


# -- reporting ---------------------------------------------------------------------

@dataclass
class Report:
    status: str
    table: list
    missing: list
    columns: list

    def to_csv(self) -> str:
        return rows_to_csv(self.table, self.columns) if self.table else ""

    def format(self) -> str:
        if self.status == "no runs":
            return "no runs"
        metric_cols = [c for c in self.columns if c.endswith("_mean")]
        names = [c[: -len("_mean")] for c in metric_cols]
        head = ["run", "n"] + names
        lines = ["  ".join(f"{h:>14}" for h in head)]
        for row in self.table:
            cells = [f"{row['strategy']:>14}", f"{row['n_seeds']:>14}"]
            for n in names:
                cells.append(f"{100 * row[n + '_mean']:7.1f}±{100 * row[n + '_std']:<5.1f}".rjust(14))
            lines.append("  ".join(cells))
        if self.missing:
            lines.append("missing runs: " + ", ".join(self.missing))
        return "\n".join(lines)


def _read_final_rows(path: Path) -> dict | None:
    import csv

    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return rows[-1] if rows else None


def report(out_dir: str | Path) -> Report:
    """Mean and population std over seeds of every run's final metrics."""
    out = Path(out_dir)
    files = sorted((out / "runs").glob("*.csv")) if (out / "runs").exists() else []
    expected = []
    if (out / "manifest.yaml").exists():
        expected = yaml.safe_load((out / "manifest.yaml").read_text()).get("expected_runs", [])
    present = {f.name[: -len(".csv")] for f in files}
    missing = [e for e in expected if e not in present]
    if not files:
        rep = Report("no runs", [], missing, [])
        _atomic_write(out / "summary.txt", "no runs\n")
        return rep
    groups: dict[str, list[dict]] = {}
    metric_names: list[str] = []
    for f in files:
        row = _read_final_rows(f)
        if row is None:
            continue
        name = f.name[: -len(".csv")].rsplit("__seed", 1)[0]
        groups.setdefault(name, []).append(row)
        if not metric_names:
            metric_names = [c for c in row if c.startswith(("acc_", "f1_"))]
    order = [e.rsplit("__seed", 1)[0] for e in expected]
    names = sorted(groups, key=lambda n: (order.index(n) if n in order else len(order), n))
    table = []
    for name in names:
        rows = groups[name]
        rec: dict = {"strategy": name, "n_seeds": len(rows)}
        for m in metric_names:
            vals = [float(r[m]) for r in rows]
            rec[m + "_mean"] = statistics.fmean(vals)
            rec[m + "_std"] = statistics.pstdev(vals)
        table.append(rec)
    columns = ["strategy", "n_seeds"] + [m + s for m in metric_names for s in ("_mean", "_std")]
    rep = Report("partial" if missing else "complete", table, missing, columns)
    _atomic_write(out / "summary.csv", rep.to_csv())
    _atomic_write(out / "summary.txt", rep.format() + "\n")
    return rep
