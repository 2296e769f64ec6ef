"""Training loop, learning-rate schedule, datasets and run conditions.

Three conditions share everything except the pause layout and the loss:

* ``baseline``: no pauses, plain next-token cross-entropy,
* ``tbys``: a fixed number of pauses, cross-entropy at the last pause only,
* ``cyb``: pauses plus the DK head trained with a CYB variant.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from cyb.dk import DKConfig, prior_shift_vector
from cyb.fileio import atomic_write
from cyb.losses import LossConfig, Variant
from cyb.model import ModelConfig, TinyLM, backward, collate, save_checkpoint, step_outputs
from cyb.objective import LossStats, batch_loss, expected_target_prob, token_losses
from cyb.pipeline import ExpandedSequence, Vocab, expand_constant, expand_sampled
from cyb.synth import EASY, HARD, SynthTaskSpec, generate_synth_corpus

log = logging.getLogger(__name__)

CONDITIONS = ("baseline", "tbys", "cyb")
LR_MIN_FACTOR = 1e-2


@dataclass
class PackingConfig:
    raw_len: int = 64
    n_pauses: int = 3
    recipe: str = "constant"  # or "sampled"

    def __post_init__(self):
        if self.raw_len < 2:
            raise ValueError("raw_len must be >= 2")
        if self.n_pauses < 0:
            raise ValueError("n_pauses must be >= 0")
        if self.recipe not in ("constant", "sampled"):
            raise ValueError(f"unknown recipe {self.recipe!r}")

    @property
    def expanded_len(self) -> int:
        """Slots per packed sequence under the constant recipe."""
        return self.raw_len * (1 + self.n_pauses)


@dataclass
class TrainConfig:
    loss: LossConfig
    model: ModelConfig
    packing: PackingConfig
    task: SynthTaskSpec
    condition: str = "cyb"
    psi_prime_dk: float = 0.9
    lr_max: float = 0.2  # divided by the model width when applied
    warmup_steps: int = 100
    total_steps: int = 1000
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.98)
    eval_every: int = 250
    eval_docs: int = 200
    deterministic: bool = True

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition: unknown {self.condition!r}")
        if self.condition == "baseline" and self.packing.n_pauses != 0:
            raise ValueError("packing.n_pauses: baseline condition requires 0 pauses")
        if self.condition == "tbys" and self.loss.variant is not Variant.TBYS:
            raise ValueError("loss.variant: tbys condition requires the TBYS variant")
        if self.condition == "cyb" and self.loss.variant is Variant.TBYS:
            raise ValueError("loss.variant: cyb condition requires AP, VA or DP")
        if self.loss.w_max != self.packing.n_pauses + 1:
            raise ValueError("loss.omega: number of steps must equal packing.n_pauses + 1")
        if self.packing.n_pauses > self.model.max_pause_slots:
            raise ValueError("model.max_pause_slots: fewer than packing.n_pauses")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps: must lie in [0, total_steps)")

    @property
    def w_max(self) -> int:
        return self.packing.n_pauses + 1

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.model.vocab_size, self.model.max_pause_slots, self.task.separator)

    @property
    def dk(self) -> DKConfig:
        return DKConfig(self.vocab.dk_id, self.model.vocab_size, self.psi_prime_dk)

    @property
    def uses_dk(self) -> bool:
        return self.condition == "cyb"


def lr_at(step: int, lr_max: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0, then cosine decay to ``lr_max * 1e-2`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr_min = lr_max * LR_MIN_FACTOR
    if step < warmup_steps:
        return lr_max * step / warmup_steps
    if total_steps == warmup_steps:
        return lr_max
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_min + (lr_max - lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


# -------------------------------------------------------------------- datasets

@dataclass
class TokenDataset:
    """Expanded sequences plus, per real token, the difficulty label of its target."""

    seqs: list[ExpandedSequence]
    target_labels: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.seqs)


def build_dataset(cfg: TrainConfig, task: SynthTaskSpec, seed: int) -> TokenDataset:
    corpus = generate_synth_corpus(task)
    if corpus.spec.n_content > cfg.vocab.n_content:
        raise ValueError("model.vocab_size: too small for the synthetic task")
    toks, labs = corpus.packed(cfg.packing.raw_len)
    rng = np.random.default_rng(seed)
    seqs, labels = [], []
    for raw, lab in zip(toks, labs):
        if cfg.packing.recipe == "sampled":
            seqs.append(expand_sampled(raw, cfg.loss.omega, rng.integers(2**63), cfg.vocab))
        else:
            seqs.append(expand_constant(raw, cfg.packing.n_pauses, cfg.vocab))
        labels.append(np.append(lab[1:], 0))
    return TokenDataset(seqs, labels)


def train_task(cfg: TrainConfig) -> SynthTaskSpec:
    return cfg.task


def eval_task(cfg: TrainConfig) -> SynthTaskSpec:
    """Same language, disjoint documents."""
    t = cfg.task
    return SynthTaskSpec(**{**t.__dict__, "seed": t.seed + 7919, "n_docs": cfg.eval_docs})


# ----------------------------------------------------------------- evaluation

def dk_shift(cfg: TrainConfig, dtype=torch.float32) -> torch.Tensor | None:
    if not cfg.uses_dk:
        return None
    return torch.tensor(prior_shift_vector(cfg.dk), dtype=dtype)


def batch_outputs(model: TinyLM, cfg: TrainConfig, seqs: list[ExpandedSequence], shift=None):
    batch = collate(seqs, cfg.w_max, cfg.task.separator)
    logits = model(batch.ids, batch.positions, batch.pause_slot)
    out = step_outputs(logits, batch, cfg.vocab.dk_id, shift)
    if cfg.condition == "tbys":
        # the abstain profile is fixed, not read from the model
        d = torch.ones_like(out.d)
        d[torch.arange(cfg.w_max) >= (out.granted.unsqueeze(-1) - 1)] = 0.0
        out.d = d
    elif not cfg.uses_dk:
        out.d = torch.zeros_like(out.d)
    return batch, out


def run_omega(cfg: TrainConfig, out) -> torch.Tensor:
    """Stop prior used for readout: per-token when budgets were sampled."""
    if cfg.packing.recipe == "sampled":
        return out.omega_granted()
    if cfg.loss.variant in (Variant.VA, Variant.DP):
        hot = torch.zeros(cfg.w_max, dtype=out.log_t.dtype)
        hot[-1] = 1.0
        return hot
    return torch.as_tensor(cfg.loss.omega, dtype=out.log_t.dtype)


@dataclass
class TokenOutputs:
    """Per real (non-masked) eval token."""

    d: np.ndarray  # (N, W)
    t: np.ndarray  # (N, W)
    omega: np.ndarray  # (N, W)
    token_id: np.ndarray  # the context token whose group produced the prediction
    target: np.ndarray
    label: np.ndarray
    seq_index: np.ndarray
    token_index: np.ndarray


@torch.no_grad()
def collect_outputs(model: TinyLM, cfg: TrainConfig, data: TokenDataset, batch_size: int = 32) -> TokenOutputs:
    model.eval()
    shift = dk_shift(cfg)
    parts = []
    for lo in range(0, len(data), batch_size):
        seqs = data.seqs[lo:lo + batch_size]
        batch, out = batch_outputs(model, cfg, seqs, shift)
        omega = run_omega(cfg, out).expand_as(out.d)
        rows = out.where[:, 0].numpy()
        cols = out.where[:, 1].numpy()
        label = np.array([data.target_labels[lo + r][c] for r, c in zip(rows, cols)], dtype=np.int64)
        parts.append((out.d.double().numpy(), out.t.double().numpy(), omega.double().numpy(),
                      out.token_id.numpy(), out.target.numpy(), label, rows + lo, cols))
    model.train()
    cat = [np.concatenate(x) for x in zip(*parts)]
    return TokenOutputs(*cat)


def eval_nll(outputs: TokenOutputs) -> np.ndarray:
    """Per-token ``-log E_s[t]`` with no discount."""
    with torch.no_grad():
        p = expected_target_prob(torch.log(torch.from_numpy(outputs.t)),
                                 torch.from_numpy(outputs.d), torch.from_numpy(outputs.omega))
    return -np.log(np.maximum(p.numpy(), 1e-300))


def evaluate(model: TinyLM, cfg: TrainConfig, data: TokenDataset) -> dict[str, float]:
    from cyb.analysis import latencies

    out = collect_outputs(model, cfg, data)
    nll = eval_nll(out)
    lat = latencies(out)
    metrics = {
        "loss": float(nll.mean()),
        "perplexity": float(np.exp(nll.mean())),
        "latency_mean": float(lat.mean()),
        "latency_std": float(lat.std()),
        "clamped": int((nll >= 690).sum()),
    }
    for name, code in (("easy", EASY), ("hard", HARD)):
        sel = out.label == code
        if sel.any():
            metrics[f"loss_{name}"] = float(nll[sel].mean())
            metrics[f"perplexity_{name}"] = float(np.exp(nll[sel].mean()))
            metrics[f"latency_mean_{name}"] = float(lat[sel].mean())
    return metrics


# ---------------------------------------------------------------- the loop

class MetricsLog:
    """Newline-delimited JSON records ``{step, split, metric, value}``."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            atomic_write(self.path, "")

    def log(self, step: int, split: str, metrics: dict) -> None:
        new = [{"step": step, "split": split, "metric": k, "value": v} for k, v in metrics.items()]
        self.records += new
        if self.path:
            # the whole log is rewritten so a crash never leaves a torn record
            atomic_write(self.path, "".join(json.dumps(r) + "\n" for r in self.records))

    def last(self, split: str, metric: str):
        for r in reversed(self.records):
            if r["split"] == split and r["metric"] == metric:
                return r["value"]
        return None


@dataclass
class TrainResult:
    model: TinyLM
    metrics: MetricsLog
    final: dict
    counters: dict = field(default_factory=dict)


def train(cfg: TrainConfig, out_dir=None, progress: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Run the loop; writes ``checkpoint.bin`` and ``metrics.jsonl`` when ``out_dir`` is given."""
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    train_data = build_dataset(cfg, train_task(cfg), cfg.seed)
    eval_data = build_dataset(cfg, eval_task(cfg), cfg.seed + 1)
    model = TinyLM(cfg.model)
    opt = torch.optim.Adam(model.parameters(), lr=0.0, betas=tuple(cfg.betas), eps=1e-8,
                           weight_decay=cfg.weight_decay)
    shift = dk_shift(cfg)
    rng = np.random.default_rng(cfg.seed)
    metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir else None)
    stats = LossStats()
    started = time.time()

    for step in range(1, cfg.total_steps + 1):
        idx = rng.integers(len(train_data), size=cfg.batch_size)
        _, out = batch_outputs(model, cfg, [train_data.seqs[i] for i in idx], shift)
        losses, st = token_losses(out.log_t, out.d, cfg.loss, run_omega(cfg, out))
        stats += st
        loss = batch_loss(losses)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}: clamped={stats.clamped} "
                                     f"support={stats.support}")
        opt.zero_grad(set_to_none=True)
        backward(model, loss)
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        lr = lr_at(step, cfg.lr_max, cfg.warmup_steps, cfg.total_steps) / cfg.model.dim
        for group in opt.param_groups:
            group["lr"] = lr
        opt.step()

        if step % 50 == 0 or step == cfg.total_steps:
            metrics.log(step, "train", {"loss": float(loss.detach()), "lr": lr,
                                        "clamped": stats.clamped, "kl_support": stats.support})
        if step % cfg.eval_every == 0 or step == cfg.total_steps:
            ev = evaluate(model, cfg, eval_data)
            metrics.log(step, "eval", ev)
            log.info("step %d loss %.4f eval %s", step, float(loss.detach()), ev)
            if progress:
                progress(step, ev)

    counters = {"steps": cfg.total_steps, "tokens_seen": cfg.total_steps * cfg.batch_size * cfg.packing.raw_len,
                "clamped": stats.clamped, "kl_support": stats.support}
    final = {k: metrics.last("eval", k) for k in ("loss", "perplexity", "loss_hard", "loss_easy")}
    log.info("trained %d steps in %.1fs", cfg.total_steps, time.time() - started)
    if out_dir:
        save_checkpoint(out_dir / "checkpoint.bin", model, extra=config_to_dict(cfg), counters=counters)
    return TrainResult(model, metrics, final, counters)


def config_to_dict(cfg: TrainConfig) -> dict:
    from cyb.config import train_config_to_dict

    return train_config_to_dict(cfg)
