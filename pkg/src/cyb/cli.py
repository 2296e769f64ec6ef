"""Command line: ``cyb train | analyze | sweep | gen-corpus``.

Exit codes: 0 success, 2 bad config or incompatible inputs, 3 runtime failure.
Runs land in ``<root>/<run_id>/`` with ``config.resolved``, ``checkpoint.bin``,
``metrics.jsonl`` and ``reports/``. The root defaults to ``$CYB_RUNS_DIR`` or
``runs``.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import yaml

from cyb.analysis import write_reports
from cyb.config import (DESK_SCALE_NOTE, ConfigError, ExperimentConfig, apply_overrides,
                        dump_config, parse_config)
from cyb.fileio import atomic_write
from cyb.model import load_checkpoint
from cyb.pipeline import write_corpus
from cyb.synth import generate_synth_corpus
from cyb.trainer import build_dataset, collect_outputs, eval_task, train

log = logging.getLogger("cyb")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
RUNS_ENV = "CYB_RUNS_DIR"
SUMMARY_METRICS = ("loss", "perplexity", "loss_easy", "loss_hard", "perplexity_hard",
                   "latency_mean", "latency_std")


class IncompatibleError(ValueError):
    pass


def default_root() -> str:
    return os.environ.get(RUNS_ENV, "runs")


def _read_tree(path) -> dict:
    try:
        tree = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError("--config", str(exc)) from None
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    if not isinstance(tree, dict):
        raise ConfigError("<root>", "config must be a mapping")
    return tree


def resolve(tree: dict, out=None, seed=None, deterministic=None, run_id=None) -> ExperimentConfig:
    tree = dict(tree)
    if seed is not None:
        tree["seed"] = seed
    if deterministic is not None:
        tree["deterministic"] = deterministic
    if run_id is not None:
        tree["run_id"] = run_id
    if out is not None:
        tree["out_dir"] = str(out)
    elif "out_dir" not in tree:
        tree["out_dir"] = default_root()
    return parse_config(tree)


def run_experiment(exp: ExperimentConfig) -> dict:
    """Train, checkpoint and analyze one run; returns the final eval metrics."""
    run_dir = exp.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(run_dir / "config.resolved", dump_config(exp))
    result = train(exp.train, run_dir)
    data = build_dataset(exp.train, eval_task(exp.train), exp.train.seed + 1)
    outputs = collect_outputs(result.model, exp.train, data)
    write_reports(outputs, data, run_dir / "reports", exp.n_permutations, DESK_SCALE_NOTE)
    return {k: result.metrics.last("eval", k) for k in SUMMARY_METRICS}


def analyze_checkpoint(checkpoint, out_dir, eval_tree: dict | None = None,
                       n_permutations: int | None = None) -> dict:
    model, header = load_checkpoint(checkpoint)
    stored = header.get("extra") or {}
    if not stored:
        raise IncompatibleError(f"{checkpoint}: checkpoint carries no run config")
    tree = eval_tree if eval_tree is not None else stored
    exp = parse_config({k: v for k, v in tree.items() if k not in ("run_id", "out_dir")})
    cfg = exp.train
    ck = model.cfg
    for name in ("vocab_size", "dim", "n_layers", "n_heads", "max_pause_slots", "use_pause_key_offset"):
        if getattr(cfg.model, name) != getattr(ck, name):
            raise IncompatibleError(f"model.{name}: eval config has {getattr(cfg.model, name)!r}, "
                                    f"checkpoint has {getattr(ck, name)!r}")
    if cfg.condition != stored.get("condition"):
        raise IncompatibleError(f"condition: eval config has {cfg.condition!r}, "
                                f"checkpoint was trained as {stored.get('condition')!r}")
    trained_w = stored["packing"]["n_pauses"] + 1
    if cfg.w_max != trained_w:
        raise IncompatibleError(f"packing.n_pauses: eval config has Wmax {cfg.w_max}, checkpoint was "
                                f"trained with Wmax {trained_w}")
    data = build_dataset(cfg, eval_task(cfg), cfg.seed + 1)
    outputs = collect_outputs(model, cfg, data)
    return write_reports(outputs, data, out_dir, n_permutations or exp.n_permutations, DESK_SCALE_NOTE)


# ---------------------------------------------------------------------- sweep

def expand_grid(spec: dict) -> list[tuple[str, dict]]:
    """``grid`` maps dotted config paths to value lists; ``runs`` lists explicit override sets."""
    grid = spec.get("grid") or {}
    runs = list(spec.get("runs") or [])
    if not isinstance(grid, dict):
        raise ConfigError("grid", "must map dotted paths to lists")
    if grid:
        keys = list(grid)
        for k in keys:
            if not isinstance(grid[k], list) or not grid[k]:
                raise ConfigError(f"grid.{k}", "must be a non-empty list")
        runs += [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]
    seeds = spec.get("seeds")
    if seeds:
        runs = [{**r, "seed": s} for r in runs for s in seeds]
    named = []
    for i, r in enumerate(runs):
        if not isinstance(r, dict):
            raise ConfigError(f"runs[{i}]", "must be a mapping of overrides")
        named.append((f"{i:03d}", r))
    return named


def _sweep_one(args) -> dict:
    base, overrides, run_id, root = args
    row = {"run_id": run_id, "overrides": json.dumps(overrides, sort_keys=True)}
    try:
        exp = resolve(apply_overrides(base, overrides), out=root, run_id=run_id)
        row.update(run_experiment(exp))
        row["status"] = "ok"
    except ConfigError as exc:
        row.update(status="config_error", error=str(exc))
    except Exception as exc:  # a failed run must not stop the sweep
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def run_sweep(spec: dict, root, jobs: int = 1) -> list[dict]:
    base = spec.get("base")
    if isinstance(base, str):
        base = _read_tree(base)
    if not isinstance(base, dict):
        raise ConfigError("base", "must be a config mapping or a path to one")
    runs = expand_grid(spec)
    if not runs:
        raise ConfigError("grid", "sweep expands to zero runs")
    parse_config(base)  # fail fast on a broken base config
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    jobs_args = [(base, o, rid, str(root)) for rid, o in runs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, jobs_args))
    else:
        rows = [_sweep_one(a) for a in jobs_args]
    fields = ["run_id", "status", "overrides", *SUMMARY_METRICS, "error"]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, restval="", lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write(root / "summary.csv", buf.getvalue())
    return rows


# ----------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cyb", description="Pause-token training with a don't-know head.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run and write its reports")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help=f"runs root (default ${RUNS_ENV} or ./runs)")
    t.add_argument("--run-id")
    t.add_argument("--seed", type=int)
    t.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)

    a = sub.add_parser("analyze", help="write reports for a trained checkpoint")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--config", help="evaluation config (default: the one stored in the checkpoint)")
    a.add_argument("--out", required=True, help="report directory")
    a.add_argument("--permutations", type=int)

    s = sub.add_parser("sweep", help="train a grid of runs")
    s.add_argument("--config", required=True, help="sweep file with base, grid/runs and seeds")
    s.add_argument("--out", help=f"sweep root (default ${RUNS_ENV} or ./runs)")
    s.add_argument("--jobs", type=int, default=1)

    g = sub.add_parser("gen-corpus", help="write the synthetic corpus of a config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output file; .bin selects the binary format")
    g.add_argument("--split", choices=("train", "eval"), default="train")
    g.add_argument("--seed", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            exp = resolve(_read_tree(args.config), args.out, args.seed, args.deterministic, args.run_id)
            metrics = run_experiment(exp)
            print(json.dumps({"run_dir": str(exp.run_dir), **metrics}))
        elif args.command == "analyze":
            tree = _read_tree(args.config) if args.config else None
            summary = analyze_checkpoint(args.checkpoint, args.out, tree, args.permutations)
            print(json.dumps(summary))
        elif args.command == "sweep":
            if args.jobs < 1:
                raise ConfigError("--jobs", "must be >= 1")
            rows = run_sweep(_read_tree(args.config), args.out or default_root(), args.jobs)
            bad = [r["run_id"] for r in rows if r["status"] != "ok"]
            if bad:
                print(f"warning: {len(bad)} of {len(rows)} runs failed: {', '.join(bad)}", file=sys.stderr)
            print(json.dumps({"runs": len(rows), "failed": len(bad)}))
        elif args.command == "gen-corpus":
            exp = resolve(_read_tree(args.config), seed=args.seed)
            task = exp.train.task if args.split == "train" else eval_task(exp.train)
            write_corpus(generate_synth_corpus(task).documents, args.out)
            print(json.dumps({"out": args.out, "documents": task.n_docs}))
    except (ConfigError, IncompatibleError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
