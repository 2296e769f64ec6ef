"""The don't-know output head.

One vocabulary entry is repurposed as "don't know". Its probability is the
abstain probability ``d``; the remaining entries are renormalized into the
answer distribution. Logits get a fixed prior shift so that DK starts with
probability ``psi_prime_dk`` under uniform logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class DKSaturationError(ValueError):
    """DK took (almost) all the mass, so the answer distribution is undefined."""


@dataclass(frozen=True)
class DKConfig:
    dk_token_id: int
    vocab_size: int
    psi_prime_dk: float = 0.9

    def __post_init__(self):
        if not 0 <= self.dk_token_id < self.vocab_size:
            raise ValueError("dk_token_id must be a vocabulary index")
        if not 0.0 < self.psi_prime_dk < 1.0:
            raise ValueError("psi_prime_dk must lie in (0, 1)")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")


def split_and_renormalize(y, cfg: DKConfig, eps: float = 1e-9):
    """Return ``(d, y_hat)``: the DK mass and the answer distribution without DK."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] != cfg.vocab_size:
        raise ValueError("distribution size does not match vocab_size")
    d = y[..., cfg.dk_token_id]
    if np.any(d >= 1.0 - eps):
        raise DKSaturationError(f"DK probability {np.max(d)} is saturated")
    y_hat = y / (1.0 - d)[..., None]
    y_hat[..., cfg.dk_token_id] = 0.0
    return (float(d) if np.ndim(d) == 0 else d), y_hat


def prior_shift_vector(cfg: DKConfig) -> np.ndarray:
    """``log(psi' / psi)`` for a uniform pretraining prior ``psi = 1/|V|``."""
    v = cfg.vocab_size
    shift = np.full(v, np.log((1.0 - cfg.psi_prime_dk) / (v - 1) * v))
    shift[cfg.dk_token_id] = np.log(cfg.psi_prime_dk * v)
    return shift


def prior_shift_logits(logits, cfg: DKConfig) -> np.ndarray:
    return np.asarray(logits, dtype=np.float64) + prior_shift_vector(cfg)


def log_d_and_log_t(logits: torch.Tensor, targets: torch.Tensor, dk_id: int,
                    shift: torch.Tensor | None = None):
    """Per-slot ``log d`` and ``log t`` from raw logits.

    ``targets`` may hold negative (masked) entries; their ``log t`` is 0.
    ``t`` is read from the renormalized answer distribution, so it does not
    depend on the DK logit at all.
    """
    if shift is not None:
        logits = logits + shift
    lse_all = torch.logsumexp(logits, dim=-1)
    dk_logit = logits[..., dk_id]
    without_dk = logits.clone()
    without_dk[..., dk_id] = float("-inf")
    lse_answer = torch.logsumexp(without_dk, dim=-1)
    log_d = dk_logit - lse_all
    safe = targets.clamp_min(0)
    tgt_logit = logits.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    log_t = torch.where(targets >= 0, tgt_logit - lse_answer, torch.zeros_like(tgt_logit))
    return log_d, log_t
