"""Post-hoc measurements on a trained model: latency, calibration, pause statistics, perplexity.

Everything here works on :class:`cyb.trainer.TokenOutputs`, the per-token
``(d, t)`` profiles collected from an evaluation set.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from cyb.fileio import atomic_write
from cyb.stop_process import suffix_mass

DEFAULT_PERMUTATIONS = 10_000
MIN_TOKEN_COUNT = 20


def readout_batch(d: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Readout distribution for many tokens at once (inputs already validated)."""
    after = suffix_mass(omega) - omega
    prefix = np.cumprod(np.concatenate([np.ones_like(d[:, :1]), d[:, :-1]], axis=1), axis=1)
    return (omega + (1.0 - d) * after) * prefix


def latencies(outputs) -> np.ndarray:
    s = readout_batch(outputs.d, outputs.omega)
    return s @ np.arange(s.shape[1], dtype=np.float64)


@dataclass
class LatencyReport:
    latency: np.ndarray  # per-token expected pause steps
    mean_readout: np.ndarray  # readout distribution averaged over tokens
    hist_edges: np.ndarray
    hist_density: np.ndarray


def latency_report(outputs, bins: int = 30) -> LatencyReport:
    s = readout_batch(outputs.d, outputs.omega)
    w = s.shape[1]
    lat = s @ np.arange(w, dtype=np.float64)
    density, edges = np.histogram(lat, bins=bins, range=(0.0, max(w - 1, 1)), density=True)
    return LatencyReport(lat, s.mean(axis=0), edges, density)


# ----------------------------------------------------------------- calibration

def spearman(x, y) -> float:
    """Spearman correlation with average ranks for ties; ``nan`` if either input is constant."""
    rx = rankdata(x)
    ry = rankdata(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        return float("nan")
    return float(rx @ ry) / denom


def permutation_pvalue(x, y, n_permutations: int = DEFAULT_PERMUTATIONS, seed=0,
                       chunk: int = 256) -> float:
    """Two-sided permutation p-value of the Spearman coefficient, ``(1 + hits) / (1 + n)``."""
    rx = rankdata(x)
    ry = rankdata(y)
    rx = (rx - rx.mean()) / np.linalg.norm(rx - rx.mean())
    ry = (ry - ry.mean()) / np.linalg.norm(ry - ry.mean())
    observed = abs(float(rx @ ry))
    rng = np.random.default_rng(seed)
    hits = 0
    done = 0
    while done < n_permutations:
        m = min(chunk, n_permutations - done)
        shuffled = rng.permuted(np.broadcast_to(ry, (m, len(ry))), axis=1)
        hits += int(np.sum(np.abs(shuffled @ rx) >= observed - 1e-12))
        done += m
    return (1 + hits) / (1 + n_permutations)


@dataclass
class StepCalibration:
    step: int  # 1-based: correlates d_step with t_{step+1} - t_step
    coefficient: float | None
    n: int
    p_value: float | None
    defined: bool


def calibration_report(outputs, n_permutations: int = DEFAULT_PERMUTATIONS, seed=0) -> list[StepCalibration]:
    """Per step, rank-correlate the DK probability with the gain from waiting one step."""
    w = outputs.d.shape[1]
    granted = np.argmax(outputs.omega[:, ::-1] > 0, axis=1)
    granted = w - granted  # last step with prior mass
    rows = []
    for i in range(1, w):
        sel = granted > i
        x = outputs.d[sel, i - 1]
        y = outputs.t[sel, i] - outputs.t[sel, i - 1]
        n = int(sel.sum())
        if n < 3 or np.all(x == x[0]) or np.all(y == y[0]):
            rows.append(StepCalibration(i, None, n, None, False))
            continue
        rows.append(StepCalibration(i, spearman(x, y), n,
                                    permutation_pvalue(x, y, n_permutations, seed + i), True))
    return rows


# --------------------------------------------------------------- pause table

@dataclass
class TokenPauseStats:
    token_id: int
    count: int
    median: float
    variance: float


def token_pause_table(outputs, min_count: int = MIN_TOKEN_COUNT) -> list[TokenPauseStats]:
    """Expected-latency statistics grouped by the token whose group made the prediction."""
    lat = latencies(outputs)
    rows = []
    for tok in np.unique(outputs.token_id):
        vals = lat[outputs.token_id == tok]
        if len(vals) < min_count:
            continue
        rows.append(TokenPauseStats(int(tok), len(vals), float(np.median(vals)), float(np.var(vals))))
    return rows


def quadrants(rows: list[TokenPauseStats]) -> dict[str, list[int]]:
    """Split tokens by median and variance at the across-token medians."""
    if not rows:
        return {}
    med = np.median([r.median for r in rows])
    var = np.median([r.variance for r in rows])
    out = {"low_median_low_variance": [], "high_median_low_variance": [],
           "low_median_high_variance": [], "high_median_high_variance": []}
    for r in rows:
        key = ("high" if r.median > med else "low") + "_median_" + ("high" if r.variance > var else "low") + "_variance"
        out[key].append(r.token_id)
    return out


# ---------------------------------------------------------------- perplexity

def token_nll(outputs, readout: str = "expected") -> np.ndarray:
    """Per-token NLL with no discount; ``readout`` is ``expected`` (``E_s[t]``) or ``argmax``."""
    s = readout_batch(outputs.d, outputs.omega)
    if readout == "expected":
        p = np.sum(s * outputs.t, axis=1)
    elif readout == "argmax":
        p = outputs.t[np.arange(len(s)), s.argmax(axis=1)]
    else:
        raise ValueError(f"unknown readout {readout!r}")
    return -np.log(np.maximum(p, 1e-300))


def perplexity(outputs, readout: str = "expected") -> tuple[float, int]:
    """``exp(mean NLL)`` and the number of tokens whose likelihood hit the floor."""
    nll = token_nll(outputs, readout)
    return float(np.exp(nll.mean())), int(np.sum(nll >= -np.log(1e-300) - 1e-9))


# --------------------------------------------------------------- report files

def token_coloring(outputs, data) -> list[dict]:
    """Per sequence, each real token with the expected pauses spent predicting it."""
    lat = latencies(outputs)
    by_seq: dict[int, dict[int, float]] = {}
    for s, j, v in zip(outputs.seq_index, outputs.token_index, lat):
        by_seq.setdefault(int(s), {})[int(j) + 1] = float(v)
    lines = []
    for s in sorted(by_seq):
        seq = data.seqs[s]
        toks = seq.ids[seq.pause_slot == 0]
        lines.append({"seq": s, "tokens": [int(x) for x in toks],
                      "latency": [by_seq[s].get(j) for j in range(len(toks))]})
    return lines


def write_reports(outputs, data, out_dir, n_permutations: int = DEFAULT_PERMUTATIONS,
                  header: str = "") -> dict:
    """Write the five report files; returns the perplexity summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    ppl, clamped = perplexity(outputs)
    ppl_argmax, _ = perplexity(outputs, "argmax")
    summary = {"note": header, "perplexity": ppl, "perplexity_argmax_readout": ppl_argmax,
               "tokens": int(len(outputs.target)), "clamped_tokens": clamped}
    for name, code in (("easy", 1), ("hard", 2)):
        sel = outputs.label == code
        if sel.any():
            summary[f"perplexity_{name}"] = float(np.exp(token_nll(outputs)[sel].mean()))
    atomic_write(out_dir / "perplexity.json", json.dumps(summary, indent=2))

    cal = calibration_report(outputs, n_permutations)
    atomic_write(out_dir / "calibration.json",
                  json.dumps({"note": header, "steps": [asdict(c) for c in cal]}, indent=2))

    rep = latency_report(outputs)
    rows = [["kind", "index", "lo", "hi", "value"]]
    for k, (lo, hi, dens) in enumerate(zip(rep.hist_edges[:-1], rep.hist_edges[1:], rep.hist_density)):
        rows.append(["histogram", k, f"{lo:.6g}", f"{hi:.6g}", f"{dens:.10g}"])
    for k, p in enumerate(rep.mean_readout):
        rows.append(["mean_readout", k, k, k, f"{p:.10g}"])
    for k, v in enumerate(rep.latency):
        rows.append(["token", k, "", "", f"{v:.10g}"])
    atomic_write(out_dir / "latency.csv", _csv(rows))

    table = token_pause_table(outputs)
    quad = quadrants(table)
    where = {tok: q for q, toks in quad.items() for tok in toks}
    rows = [["token_id", "count", "median_latency", "variance_latency", "quadrant"]]
    for r in sorted(table, key=lambda r: (r.median, r.token_id)):
        rows.append([r.token_id, r.count, f"{r.median:.10g}", f"{r.variance:.10g}", where[r.token_id]])
    atomic_write(out_dir / "token_pause_table.csv", _csv(rows))

    lines = token_coloring(outputs, data)
    atomic_write(out_dir / "token_coloring.jsonl", "".join(json.dumps(x) + "\n" for x in lines))
    return summary


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()
