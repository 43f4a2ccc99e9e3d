import csv
import statistics

import numpy as np
import pytest
import yaml

from fedssg import cli
from fedssg.core import ConfigError
from fedssg.experiment import (PRESETS, ExperimentConfig, Pipeline, desk_config, load_config, parse_config,
                               preset_fragment, report, run_experiment)

FAST = {"federation": {"rounds": 2, "eval_interval": 1, "local_epochs": 1},
        "pretrain": {"epochs": 2}, "generator": {"T": 8, "epochs": 1, "hidden": [8]}}


def fast_config(tmp_path, **over):
    return desk_config(**{**FAST, "output_dir": str(tmp_path / "out"), "seeds": [0], **over})


def test_defaults_parse():
    cfg = parse_config({})
    assert cfg == ExperimentConfig()
    assert cfg.runs()[0][0] == "fedavg"


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="federation: unknown key"):
        parse_config({"federation": {"rounds": 3, "roundz": 4}})
    with pytest.raises(ConfigError, match="unknown top-level"):
        parse_config({"federatoin": {}})
    with pytest.raises(ConfigError, match=r"grid\[0\]"):
        parse_config({"grid": [{"name": "x", "federation": {"nope": 1}}]})


def test_field_level_value_errors():
    with pytest.raises(ConfigError, match="federation: strategy"):
        parse_config({"federation": {"strategy": "scaffold"}})
    with pytest.raises(ConfigError, match="seeds"):
        parse_config({"seeds": [-1]})
    with pytest.raises(ConfigError, match="unique"):
        parse_config({"grid": [{"name": "a"}, {"name": "a"}]})


def test_table2_preset_has_eight_rows():
    runs = parse_config(preset_fragment("table2")).runs()
    assert len(runs) == 8
    keys = {(c.federation.label.replace("-scratch", ""), c.federation.use_pretraining) for _, c in runs}
    assert keys == {(s, p) for s in ("fedavg", "moon", "fedprox", "fedssg") for p in (True, False)}


def test_table4_preset_scales():
    runs = parse_config(preset_fragment("table4")).runs()
    scales = [c.allocator.domain_scales for _, c in runs]
    assert scales == [(50.0,) * 3, (10.0, 25.0, 40.0), (20.0, 50.0, 80.0), (40.0, 100.0, 160.0)]
    assert [c.allocator.allow_scale_override for _, c in runs] == [True, False, False, False]
    assert all(c.federation.use_synthetic for _, c in runs)


def test_clients_preset_grid():
    runs = parse_config(preset_fragment("clients")).runs()
    Ks = {c.federation.K for _, c in runs}
    actives = {c.federation.active_per_round for _, c in runs}
    assert Ks == {70, 85, 100} and actives == {4, 6, 8}


def test_full_preset_uses_full_counts_and_fixed_layout():
    cfg = parse_config(preset_fragment("full"))
    assert cfg.benchmark.domain_sizes == [9615, 3364, 790]
    assert cfg.federation.clients_per_domain == (56, 24, 5)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        preset_fragment("table9")


def test_manifest_config_round_trip(tmp_path):
    cfg = load_config(None, "table4", {"seeds": [1, 2]})
    echoed = yaml.safe_load(yaml.safe_dump(cfg.to_dict()))
    assert parse_config(echoed) == cfg


def test_config_file_with_presets(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("presets: desk\nseeds: [3]\nfederation: {rounds: 7}\n")
    cfg = load_config(path)
    assert cfg.seeds == (3,) and cfg.federation.rounds == 7 and cfg.federation.K == 20
    assert [n for n, _ in cfg.runs()] == ["fedavg", "fedssg"]


def test_experiment_outputs_and_crash_safety(tmp_path):
    cfg = fast_config(tmp_path, seeds=[0, 1])
    out = tmp_path / "out"
    run_experiment(cfg, out)
    manifest = yaml.safe_load((out / "manifest.yaml").read_text())
    assert parse_config(manifest["config"]) == cfg
    assert manifest["version"] and len(manifest["expected_runs"]) == 4
    assert not list(out.rglob("*.tmp"))
    rep = report(out)
    assert rep.status == "complete" and len(rep.table) == 2
    # losing a run leaves the rest readable and lists the gap
    (out / "runs" / "fedssg__seed1.csv").unlink()
    rep = report(out)
    assert rep.status == "partial" and rep.missing == ["fedssg__seed1"]
    assert {r["strategy"]: r["n_seeds"] for r in rep.table} == {"fedavg": 2, "fedssg": 1}
    assert "missing runs: fedssg__seed1" in (out / "summary.txt").read_text()


def _write_run(out, name, seed, acc):
    cols = ["round", "strategy", "seed", "acc_A", "acc_Avg", "f1_A", "f1_Avg"]
    path = out / "runs" / f"{name}__seed{seed}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        w.writerow([5, name, seed, 0.1, 0.1, 0.1, 0.1])
        w.writerow([10, name, seed, acc, acc, acc / 2, acc / 2])


def test_report_single_run_has_zero_std(tmp_path):
    _write_run(tmp_path, "x", 0, 0.75)
    rep = report(tmp_path)
    row = rep.table[0]
    assert row["acc_A_mean"] == 0.75 and row["acc_A_std"] == 0.0


def test_report_two_runs_by_hand(tmp_path):
    _write_run(tmp_path, "x", 0, 0.6)
    _write_run(tmp_path, "x", 1, 0.8)
    row = report(tmp_path).table[0]
    assert row["acc_Avg_mean"] == pytest.approx(0.7, abs=1e-12)
    assert row["acc_Avg_std"] == pytest.approx(0.1, abs=1e-12)  # population std: |0.8 - 0.6| / 2
    assert row["f1_Avg_std"] == pytest.approx(statistics.pstdev([0.3, 0.4]), abs=1e-12)


def test_report_empty(tmp_path):
    rep = report(tmp_path)
    assert rep.status == "no runs" and rep.format() == "no runs"


def test_pipeline_caches_generator(tmp_path):
    cfg = fast_config(tmp_path)
    pipe = Pipeline(tmp_path / "cache")
    _, pub = pipe.benchmark(cfg.benchmark, 0)
    g1 = pipe.generator(cfg, 0, pub)
    assert pipe.generator(cfg, 0, pub) is g1
    fresh = Pipeline(tmp_path / "cache")
    assert fresh.generator(cfg, 0, fresh.benchmark(cfg.benchmark, 0)[1]).checksum() == g1.checksum()
    assert len(list((tmp_path / "cache").glob("generator-*"))) == 1


def test_cli_invalid_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("federation: {rounds: 2, colour: red}\n")
    assert cli.main(["run", "--config", str(bad)]) == 2
    assert "federation: unknown key(s) colour" in capsys.readouterr().err


def test_cli_scale_violation_exits_nonzero(tmp_path, capsys):
    cfgf = tmp_path / "c.yaml"
    cfgf.write_text(yaml.safe_dump({**FAST, "presets": "desk", "allocator": {"domain_scales": [50, 50, 50]},
                                    "grid": [{"name": "s", "federation": {"use_synthetic": True}}]}))
    assert cli.main(["run", "--config", str(cfgf), "--out", str(tmp_path / "o")]) == 1
    assert "validate_domain_scales" in capsys.readouterr().err


def test_cli_verbs(tmp_path, capsys):
    cfgf = tmp_path / "c.yaml"
    cfgf.write_text(yaml.safe_dump({**FAST, "presets": "desk"}))
    out = tmp_path / "o"
    for verb in ("gen-data", "pretrain", "train-generator"):
        assert cli.main([verb, "--config", str(cfgf), "--seed", "4", "--out", str(out)]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert names == ["benchmark-seed4.json", "config.yaml", "generator-seed4.txt", "private-seed4.jsonl",
                     "public-seed4.jsonl", "theta0-seed4.txt"]
    assert cli.main(["run", "--config", str(cfgf), "--seed", "4", "--out", str(out)]) == 0
    assert cli.main(["report", "--out", str(out)]) == 0
    assert "fedssg" in capsys.readouterr().out
    assert cli.main(["report", "--out", str(tmp_path / "nothing")]) == 1


def test_presets_are_valid():
    for name in PRESETS:
        parse_config(preset_fragment(name)).runs()
