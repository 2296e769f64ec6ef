"""A small causal transformer that reads pause-expanded sequences.

Rotary phases come from the pipeline's position indices, so a real token and
its pauses share a phase. Pauses are told apart by their own embeddings and,
optionally, by a learned offset added to the key input of each attention
layer.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cyb.dk import log_d_and_log_t
from cyb.pipeline import MASK, ExpandedSequence


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, names: list[str]):
        super().__init__("non-finite gradients in: " + ", ".join(names))
        self.names = names


@dataclass
class ModelConfig:
    vocab_size: int = 64
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_pause_slots: int = 3
    use_pause_key_offset: bool = False
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError("dim must be divisible by n_heads")
        if (self.dim // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")


def rope(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate pairs ``(x[..., :h], x[..., h:])`` by angle ``position * base**(-2j/d)``.

    ``x`` is ``(B, H, L, D)``; ``positions`` is ``(B, L)`` and may repeat.
    """
    half = x.shape[-1] // 2
    inv = base ** (-torch.arange(half, dtype=x.dtype, device=x.device) / half)
    ang = positions.to(x.dtype)[:, None, :, None] * inv
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.dim // cfg.n_heads
        self.base = cfg.rope_base
        self.q = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.k = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.v = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.o = nn.Linear(cfg.dim, cfg.dim, bias=False)
        if cfg.use_pause_key_offset:
            self.pause_key_offset = nn.Parameter(torch.zeros(cfg.max_pause_slots, cfg.dim))
        else:
            self.pause_key_offset = None

    def _heads(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, z, positions, pause_slot):
        key_in = z
        if self.pause_key_offset is not None:
            table = torch.cat([torch.zeros_like(self.pause_key_offset[:1]), self.pause_key_offset])
            key_in = z + table[pause_slot]
        q = rope(self._heads(self.q(z)), positions, self.base)
        k = rope(self._heads(self.k(key_in)), positions, self.base)
        v = self._heads(self.v(z))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        l = z.shape[1]
        causal = torch.ones(l, l, dtype=torch.bool, device=z.device).triu(1)
        scores = scores.masked_fill(causal, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        b = z.shape[0]
        return self.o(out.transpose(1, 2).reshape(b, l, -1))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.dim)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.dim)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.dim, cfg.mlp_ratio * cfg.dim),
            nn.GELU(),
            nn.Linear(cfg.mlp_ratio * cfg.dim, cfg.dim),
        )

    def forward(self, x, positions, pause_slot):
        x = x + self.attn(self.ln1(x), positions, pause_slot)
        return x + self.mlp(self.ln2(x))


class TinyLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        self.embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)
        self._init(gen)

    @torch.no_grad()
    def _init(self, gen: torch.Generator) -> None:
        std = 0.02
        resid = std / math.sqrt(2 * self.cfg.n_layers)
        for name, p in self.named_parameters():
            if "pause_key_offset" in name:
                p.zero_()
            elif name.endswith("bias"):
                p.zero_()
            elif "ln" in name:
                p.fill_(1.0)
            elif name.endswith("attn.o.weight") or name.endswith("mlp.2.weight"):
                p.copy_(torch.randn(p.shape, generator=gen) * resid)
            else:
                p.copy_(torch.randn(p.shape, generator=gen) * std)

    def forward(self, ids: torch.Tensor, positions: torch.Tensor, pause_slot: torch.Tensor) -> torch.Tensor:
        """Logits of shape ``(B, L, vocab_size)``."""
        if ids.min() < 0 or ids.max() >= self.cfg.vocab_size:
            raise ValueError("token id outside the vocabulary")
        if positions.min() < 0:
            raise ValueError("positions must be non-negative")
        if pause_slot.max() > self.cfg.max_pause_slots:
            raise ValueError(f"pause slot {int(pause_slot.max())} exceeds max_pause_slots")
        x = self.embed(ids)
        for block in self.blocks:
            x = block(x, positions, pause_slot)
        return self.head(self.ln_f(x))


def backward(model: nn.Module, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    """Backpropagate and return named gradients; raise if any is non-finite."""
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss.item()}")
    loss.backward()
    grads = {}
    bad = []
    for name, p in model.named_parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        if not torch.isfinite(g).all():
            bad.append(name)
        grads[name] = g
    if bad:
        raise NonFiniteGradientError(bad)
    return grads


# ------------------------------------------------------------------- batching

@dataclass
class Batch:
    ids: torch.Tensor  # (B, L)
    positions: torch.Tensor
    pause_slot: torch.Tensor
    slot_target: torch.Tensor  # (B, L), MASK on padding
    slot_index: torch.Tensor  # (B, T, W) flat slot index of each step, -1 if absent
    granted: torch.Tensor  # (B, T), 0 on padding
    token_target: torch.Tensor  # (B, T), MASK on padding and sequence ends
    token_id: torch.Tensor  # (B, T), the real token owning each group
    w_max: int

    @property
    def token_mask(self) -> torch.Tensor:
        return self.token_target >= 0


def collate(seqs: Sequence[ExpandedSequence], w_max: int, pad_id: int = 0) -> Batch:
    b = len(seqs)
    l = max(len(s) for s in seqs)
    t = max(s.n_tokens for s in seqs)
    ids = np.full((b, l), pad_id, dtype=np.int64)
    pos = np.zeros((b, l), dtype=np.int64)
    slot = np.zeros((b, l), dtype=np.int64)
    starget = np.full((b, l), MASK, dtype=np.int64)
    index = np.full((b, t, w_max), -1, dtype=np.int64)
    granted = np.zeros((b, t), dtype=np.int64)
    ttarget = np.full((b, t), MASK, dtype=np.int64)
    tid = np.zeros((b, t), dtype=np.int64)
    for r, s in enumerate(seqs):
        n = len(s)
        if s.granted.max() > w_max:
            raise ValueError("a token was granted more steps than w_max")
        ids[r, :n] = s.ids
        pos[r, :n] = s.positions
        pos[r, n:] = s.positions[-1]
        slot[r, :n] = s.pause_slot
        starget[r, :n] = s.target
        group = s.group
        index[r, group, s.step_of_slot - 1] = r * l + np.arange(n)
        granted[r, :s.n_tokens] = s.granted
        real = s.pause_slot == 0
        ttarget[r, :s.n_tokens] = s.target[real]
        tid[r, :s.n_tokens] = s.ids[real]
    as_t = torch.from_numpy
    return Batch(as_t(ids), as_t(pos), as_t(slot), as_t(starget), as_t(index),
                 as_t(granted), as_t(ttarget), as_t(tid), w_max)


@dataclass
class StepOutputs:
    log_t: torch.Tensor  # (N, W) over real, non-masked tokens
    d: torch.Tensor  # (N, W); 0 at each token's last granted step and beyond
    granted: torch.Tensor  # (N,)
    token_id: torch.Tensor  # (N,)
    target: torch.Tensor  # (N,)
    where: torch.Tensor  # (N, 2) batch row and token index of each entry

    @property
    def t(self) -> torch.Tensor:
        return torch.exp(self.log_t)

    def omega_granted(self) -> torch.Tensor:
        """One-hot prior at each token's granted step count."""
        w = self.log_t.shape[-1]
        return F.one_hot(self.granted - 1, w).to(self.log_t.dtype)


def step_outputs(logits: torch.Tensor, batch: Batch, dk_id: int,
                 shift: torch.Tensor | None = None) -> StepOutputs:
    """Group per-slot outputs into per-token ``(d, t)`` profiles."""
    log_d, log_t = log_d_and_log_t(logits, batch.slot_target, dk_id, shift)
    flat_d = torch.exp(log_d).reshape(-1)
    flat_t = log_t.reshape(-1)
    idx = batch.slot_index
    present = idx >= 0
    safe = idx.clamp_min(0)
    d = torch.where(present, flat_d[safe], torch.zeros((), dtype=flat_d.dtype))
    lt = torch.where(present, flat_t[safe], torch.zeros((), dtype=flat_t.dtype))
    w = batch.w_max
    step = torch.arange(1, w + 1, device=idx.device)
    d = torch.where(step < batch.granted.unsqueeze(-1), d, torch.zeros((), dtype=d.dtype))
    keep = batch.token_mask
    where = keep.nonzero()
    return StepOutputs(lt[keep], d[keep], batch.granted[keep], batch.token_id[keep],
                       batch.token_target[keep], where)


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"CYBCKPT1"


def save_checkpoint(path, model: TinyLM, extra: dict | None = None, counters: dict | None = None) -> None:
    """Write ``magic | u64 header length | JSON header | tensor data``.

    The header records the model config, free-form run metadata, training
    counters and, per tensor, its name, shape and byte offset. Tensor data is
    little-endian float32. The file is written to a temporary name and then
    renamed into place.
    """
    path = Path(path)
    tensors, index, offset = [], [], 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        tensors.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "model": asdict(model.cfg),
        "extra": extra or {},
        "counters": counters or {},
        "tensors": index,
    }).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in tensors:
            fh.write(chunk)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TinyLM, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    (n,) = struct.unpack_from("<Q", data, len(_CKPT_MAGIC))
    start = len(_CKPT_MAGIC) + 8
    header = json.loads(data[start:start + n])
    body = start + n
    model = TinyLM(ModelConfig(**header["model"]))
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=body + entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    model.load_state_dict(state)
    return model, header
