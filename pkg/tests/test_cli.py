import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from cyb.cli import EXIT_CONFIG, EXIT_OK, RUNS_ENV, expand_grid, main
from cyb.pipeline import read_corpus

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.yaml"
REPORTS = ("perplexity.json", "calibration.json", "latency.csv", "token_pause_table.csv", "token_coloring.jsonl")


def tiny_tree(**overrides):
    tree = yaml.safe_load(SMOKE.read_text())
    tree["task"]["n_docs"] = 20
    tree["train"].update(total_steps=4, warmup_steps=2, eval_every=4, eval_docs=10)
    tree["analyze"]["n_permutations"] = 50
    tree.update(overrides)
    return tree


def write_yaml(path, tree):
    path.write_text(yaml.safe_dump(tree))
    return str(path)


def digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = write_yaml(root / "c.yaml", tiny_tree())
    assert main(["train", "--config", cfg, "--out", str(root), "--run-id", "a"]) == EXIT_OK
    return root, cfg


def test_train_writes_run_directory(trained):
    root, _ = trained
    run = root / "a"
    for name in ("config.resolved", "checkpoint.bin", "metrics.jsonl"):
        assert (run / name).is_file()
    for name in REPORTS:
        assert (run / "reports" / name).is_file()
    records = [json.loads(x) for x in (run / "metrics.jsonl").read_text().splitlines()]
    assert {r["split"] for r in records} == {"train", "eval"}


def test_same_seed_rerun_is_identical(trained):
    root, cfg = trained
    assert main(["train", "--config", cfg, "--out", str(root), "--run-id", "b"]) == EXIT_OK
    assert digest(root / "a" / "metrics.jsonl") == digest(root / "b" / "metrics.jsonl")


def test_missing_rho_under_va(tmp_path, capsys):
    tree = tiny_tree()
    tree["loss"] = {"variant": "VA"}
    assert main(["train", "--config", write_yaml(tmp_path / "c.yaml", tree), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "loss.rho" in capsys.readouterr().err
    assert not (tmp_path / "smoke" / "checkpoint.bin").exists()


def test_missing_config_file(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG


def test_analyze_writes_reports(trained, tmp_path, capsys):
    root, _ = trained
    code = main(["analyze", "--checkpoint", str(root / "a" / "checkpoint.bin"), "--out", str(tmp_path / "r"),
                 "--permutations", "20"])
    assert code == EXIT_OK
    for name in REPORTS:
        assert (tmp_path / "r" / name).is_file()
    json.loads((tmp_path / "r" / "perplexity.json").read_text())
    json.loads(capsys.readouterr().out)


@pytest.mark.parametrize("override", [{"packing": {"raw_len": 32, "n_pauses": 2}},
                                      {"model": {"vocab_size": 64, "dim": 16, "n_layers": 2, "n_heads": 2}},
                                      {"condition": "tbys"}])
def test_analyze_rejects_incompatible(trained, tmp_path, override, capsys):
    root, _ = trained
    tree = tiny_tree(**override)
    if "packing" in override or override.get("condition") == "tbys":
        del tree["loss"]
    code = main(["analyze", "--checkpoint", str(root / "a" / "checkpoint.bin"), "--out", str(tmp_path),
                 "--config", write_yaml(tmp_path / "e.yaml", tree)])
    assert code == EXIT_CONFIG
    assert capsys.readouterr().err.startswith("error:")


def test_baseline_latencies_are_zero(tmp_path):
    tree = tiny_tree(condition="baseline", packing={"raw_len": 32, "n_pauses": 0})
    del tree["loss"]
    cfg = write_yaml(tmp_path / "b.yaml", tree)
    assert main(["train", "--config", cfg, "--out", str(tmp_path), "--run-id", "base"]) == EXIT_OK
    out = tmp_path / "r"
    assert main(["analyze", "--checkpoint", str(tmp_path / "base" / "checkpoint.bin"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "latency.csv")))
    assert rows and all(float(r["value"]) == 0.0 for r in rows if r["kind"] == "token")


def test_sweep_over_priors(tmp_path, capsys):
    spec = {"base": tiny_tree(), "grid": {"loss.omega": ["0:0:0:1", "1:1:1:1", "4:1:1:4"]}}
    assert main(["sweep", "--config", write_yaml(tmp_path / "s.yaml", spec), "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert [r["run_id"] for r in rows] == ["000", "001", "002"]
    assert all(r["status"] == "ok" and np.isfinite(float(r["loss"])) for r in rows)
    assert json.loads(capsys.readouterr().out) == {"runs": 3, "failed": 0}


def test_sweep_with_a_failing_run(tmp_path, capsys):
    spec = {"base": tiny_tree(), "runs": [{"loss.variant": "VA"}, {}]}
    assert main(["sweep", "--config", write_yaml(tmp_path / "s.yaml", spec), "--out", str(tmp_path)]) == EXIT_OK
    captured = capsys.readouterr()
    assert "warning: 1 of 2 runs failed: 000" in captured.err
    rows = list(csv.DictReader(open(tmp_path / "summary.csv")))
    assert [r["status"] for r in rows] == ["config_error", "ok"]
    assert "loss.rho" in rows[0]["error"]


def test_empty_grid(tmp_path):
    spec = {"base": tiny_tree(), "grid": {}}
    assert main(["sweep", "--config", write_yaml(tmp_path / "s.yaml", spec), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_expand_grid_with_seeds():
    runs = expand_grid({"grid": {"a": [1, 2], "b": ["x"]}, "seeds": [0, 1]})
    assert [r for _, r in runs] == [{"a": 1, "b": "x", "seed": 0}, {"a": 1, "b": "x", "seed": 1},
                                    {"a": 2, "b": "x", "seed": 0}, {"a": 2, "b": "x", "seed": 1}]
    assert [rid for rid, _ in runs] == ["000", "001", "002", "003"]


@pytest.mark.parametrize("suffix", [".txt", ".bin"])
def test_gen_corpus(tmp_path, suffix):
    out = tmp_path / f"corpus{suffix}"
    assert main(["gen-corpus", "--config", write_yaml(tmp_path / "c.yaml", tiny_tree()), "--out", str(out)]) == 0
    docs = read_corpus(out)
    assert len(docs) == 20 and all(len(d) > 0 for d in docs)


def test_runs_dir_from_environment(tmp_path):
    cfg = write_yaml(tmp_path / "c.yaml", tiny_tree())
    root = tmp_path / "env_root"
    env = {"PATH": "/usr/bin:/bin", RUNS_ENV: str(root), "PYTHONWARNINGS": "ignore"}
    proc = subprocess.run([sys.executable, "-m", "cyb", "train", "--config", cfg], env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (root / "smoke" / "checkpoint.bin").is_file()
    assert json.loads(proc.stdout)["run_dir"] == str(root / "smoke")
