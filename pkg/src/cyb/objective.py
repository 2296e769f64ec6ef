"""Batched torch versions of the loss family, for training.

Inputs are per real token: ``log_t`` and ``d`` of shape ``(N, W)``. ``omega``
is either the run's prior (``(W,)``) or a per-token prior (``(N, W)``, used
when each token was granted its own number of steps).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from cyb.losses import UNDERFLOW_FLOOR, LossConfig, Variant

KL_FLOOR = 1e-12


@dataclass
class LossStats:
    clamped: int = 0  # tokens whose expected accuracy hit the underflow floor
    support: int = 0  # tokens with a KL support violation (value saturated)

    def __iadd__(self, other: "LossStats") -> "LossStats":
        self.clamped += other.clamped
        self.support += other.support
        return self


def readout(d: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Readout distribution, batched over leading axes."""
    omega = omega.to(d.dtype).expand_as(d)
    tail = torch.flip(torch.cumsum(torch.flip(omega, [-1]), -1), [-1])
    after = tail - omega
    ones = torch.ones_like(d[..., :1])
    prefix = torch.cumprod(torch.cat([ones, d[..., :-1]], dim=-1), dim=-1)
    return (omega + (1.0 - d) * after) * prefix


def _floor(dtype: torch.dtype) -> float:
    return max(UNDERFLOW_FLOOR, torch.finfo(dtype).tiny)


def _kl(p: torch.Tensor, q: torch.Tensor):
    """Row-wise KL(p || q) with q floored; also returns rows that violated support."""
    violation = ((p > 0) & (q < KL_FLOOR)).any(dim=-1)
    q_safe = q.clamp_min(KL_FLOOR)
    p_log = torch.log(p.clamp_min(KL_FLOOR))
    kl = torch.where(p > 0, p * (p_log - torch.log(q_safe)), torch.zeros_like(p)).sum(-1)
    return kl, violation


def _tensor(x, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(x, dtype=like.dtype, device=like.device)


def token_losses(log_t: torch.Tensor, d: torch.Tensor, cfg: LossConfig,
                 omega: torch.Tensor | None = None) -> tuple[torch.Tensor, LossStats]:
    """Per-token loss of the configured variant, shape ``(N,)``."""
    w = log_t.shape[-1]
    gamma = _tensor(cfg.gamma, log_t)
    if omega is None:
        omega = _tensor(cfg.omega, log_t)
    hot = torch.zeros(w, dtype=log_t.dtype, device=log_t.device)
    hot[-1] = 1.0
    stats = LossStats()
    v = cfg.variant

    if v is Variant.TBYS:
        d = torch.ones_like(d)
        d[..., -1] = 0.0
    if v in (Variant.VA, Variant.DP) and omega.dim() == 1:
        omega = hot
    s = readout(d, omega)

    if v is Variant.VA:
        rho = _tensor(cfg.rho, log_t)
        nll = -(s * (torch.log(gamma) + log_t)).sum(-1)
        kl, bad = _kl(s, rho)
        stats.support = int(bad.sum())
        return nll + kl, stats

    e = (s * gamma * torch.exp(log_t)).sum(-1)
    floor = _floor(e.dtype)
    stats.clamped = int((e <= floor).sum())
    loss = -torch.log(e.clamp_min(floor))
    if v is Variant.DP and cfg.alpha:
        rho = _tensor(cfg.rho, log_t).expand_as(s)
        kl, bad = _kl(rho, s)
        stats.support = int(bad.sum())
        loss = loss + cfg.alpha * kl
    return loss, stats


def expected_target_prob(log_t: torch.Tensor, d: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Evaluation likelihood ``E_s[t]`` with no discount."""
    return (readout(d, omega) * torch.exp(log_t)).sum(-1)


def argmax_step_prob(log_t: torch.Tensor, d: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """Alternative evaluation likelihood: ``t`` at the most probable readout step."""
    s = readout(d, omega)
    return torch.exp(log_t.gather(-1, s.argmax(-1, keepdim=True))).squeeze(-1)


def batch_loss(losses: torch.Tensor) -> torch.Tensor:
    """Mean over real tokens; a batch with no unmasked token contributes exactly 0."""
    return losses.sum() / max(losses.numel(), 1)
