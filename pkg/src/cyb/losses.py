"""Catch-Your-Breath loss family, evaluated per token in float64.

These are the reference implementations: plain numpy, one token at a time
(or broadcast over a leading batch axis), with hand-derived gradients. The
batched torch versions used for training live in :mod:`cyb.objective` and are
checked against these.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from cyb.stop_process import (
    _exclusive_cumprod,
    one_hot_prior,
    readout_distribution,
    suffix_mass,
    validate_prior,
)

UNDERFLOW_FLOOR = 1e-300


class DegenerateLossError(ArithmeticError):
    """Expected discounted accuracy fell to the underflow floor."""


class Variant(str, enum.Enum):
    AP = "AP"
    VA = "VA"
    DP = "DP"
    TBYS = "TBYS"


class DiscountKind(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


def make_discount(kind, gamma0: float, w_max: int) -> np.ndarray:
    """Per-step accuracy discount.

    linear: ``1 - (i - 1)(1 - gamma0)``; exponential: ``gamma0 ** (i - 1)``;
    constant: all ones.
    """
    kind = DiscountKind(kind)
    if not 0.0 < gamma0 <= 1.0:
        raise ValueError(f"gamma0: must lie in (0, 1], got {gamma0}")
    if w_max < 1:
        raise ValueError("w_max must be >= 1")
    k = np.arange(w_max, dtype=np.float64)
    if kind is DiscountKind.CONSTANT:
        return np.ones(w_max)
    if kind is DiscountKind.LINEAR:
        return np.clip(1.0 - k * (1.0 - gamma0), 0.0, 1.0)
    return gamma0**k


def tbys_abstain(w_max: int) -> np.ndarray:
    """The fixed abstain profile (1, ..., 1, 0) of the final-step cross-entropy baseline."""
    d = np.ones(w_max)
    d[-1] = 0.0
    return d


@dataclass
class LossConfig:
    variant: Variant = Variant.AP
    omega: np.ndarray = field(default_factory=lambda: one_hot_prior(4))
    gamma: np.ndarray = field(default_factory=lambda: np.ones(4))
    rho: np.ndarray | None = None
    alpha: float = 0.0
    discount_kind: DiscountKind = DiscountKind.CONSTANT
    gamma0: float = 1.0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.discount_kind = DiscountKind(self.discount_kind)
        self.omega = np.asarray(self.omega, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.rho is not None:
            self.rho = np.asarray(self.rho, dtype=np.float64)

    @property
    def w_max(self) -> int:
        return int(self.omega.shape[-1])

    @classmethod
    def build(cls, variant, w_max: int, omega=None, discount="constant",
              gamma0: float = 1.0, rho=None, alpha: float = 0.0) -> "LossConfig":
        variant = Variant(variant)
        if omega is None:
            omega = one_hot_prior(w_max)
        cfg = cls(variant=variant, omega=omega, gamma=make_discount(discount, gamma0, w_max),
                  rho=rho, alpha=alpha, discount_kind=discount, gamma0=gamma0)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Raise ``ValueError`` naming the offending field."""
        try:
            self.omega = validate_prior(self.omega)
        except ValueError as exc:
            raise ValueError(f"omega: {exc}") from None
        w = self.w_max
        if self.gamma.shape != (w,):
            raise ValueError(f"gamma: expected {w} steps, got shape {self.gamma.shape}")
        if np.any(self.gamma < 0) or np.any(self.gamma > 1) or np.any(np.diff(self.gamma) > 0):
            raise ValueError("gamma: must lie in [0, 1] and be non-increasing")
        hot = np.array_equal(self.omega, one_hot_prior(w))
        if self.variant in (Variant.VA, Variant.DP):
            if self.rho is None:
                raise ValueError(f"rho: required for variant {self.variant.value}")
            try:
                self.rho = validate_prior(self.rho)
            except ValueError as exc:
                raise ValueError(f"rho: {exc}") from None
            if self.rho.shape != (w,):
                raise ValueError(f"rho: expected {w} steps")
            if not hot:
                raise ValueError(f"omega: variant {self.variant.value} requires all mass on the final step")
        if self.variant is Variant.VA and np.any(self.gamma != 1.0):
            raise ValueError("gamma: variant VA requires a constant discount of 1")
        if self.variant is Variant.DP and not self.alpha >= 0:
            raise ValueError("alpha: must be non-negative")
        if self.variant is Variant.TBYS:
            if not hot:
                raise ValueError("omega: variant TBYS requires all mass on the final step")
            if np.any(self.gamma != 1.0):
                raise ValueError("gamma: variant TBYS requires a constant discount of 1")


def kl_divergence(p, q) -> float:
    """``sum_i p_i log(p_i / q_i)`` with ``0 log 0 = 0``; ``inf`` where ``p_i > 0 = q_i``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    if np.any((p > 0) & (q <= 0)):
        return float("inf")
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _as_targets(t, w_max: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.shape[-1] != w_max:
        raise ValueError(f"dimension mismatch: t has {t.shape[-1]} steps, expected {w_max}")
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t entries must lie in [0, 1]")
    return t


def expected_accuracy(t, dk, omega, gamma) -> float:
    s = readout_distribution(dk, omega)
    t = _as_targets(t, s.shape[-1])
    return float(np.sum(s * np.asarray(gamma) * t))


def cyb_loss(t, dk, cfg: LossConfig) -> float:
    """Negative log expected discounted accuracy under the readout distribution."""
    e = expected_accuracy(t, dk, cfg.omega, cfg.gamma)
    if e <= UNDERFLOW_FLOOR:
        raise DegenerateLossError(f"expected discounted accuracy {e!r} at underflow floor")
    return float(-np.log(e))


def cyb_rho_loss(t, rho, gamma=None) -> float:
    """Loss if readout followed ``rho`` exactly; the VA objective upper-bounds it."""
    rho = validate_prior(rho)
    t = _as_targets(t, rho.shape[-1])
    gamma = np.ones_like(rho) if gamma is None else np.asarray(gamma)
    return float(-np.log(np.sum(rho * gamma * t)))


def cyb_va_loss(t, dk, rho) -> float:
    """Negative ELBO: ``-E_s[log t] + KL(s || rho)`` with no early world stop."""
    rho = validate_prior(rho)
    w = rho.shape[-1]
    s = readout_distribution(dk, one_hot_prior(w))
    t = _as_targets(t, w)
    used = s > 0
    if np.any(used & (t <= 0)):
        raise DegenerateLossError("readout mass on a step with zero target probability")
    nll = -float(np.sum(s[used] * np.log(t[used])))
    return nll + kl_divergence(s, rho)


def cyb_dp_loss(t, dk, rho, alpha: float, gamma=None) -> float:
    """Base loss plus ``alpha * KL(rho || s)`` with no early world stop."""
    rho = validate_prior(rho)
    w = rho.shape[-1]
    gamma = np.ones(w) if gamma is None else gamma
    base = cyb_loss(t, dk, LossConfig(omega=one_hot_prior(w), gamma=gamma))
    if alpha == 0:
        return base
    s = readout_distribution(dk, one_hot_prior(w))
    return base + alpha * kl_divergence(rho, s)


def variant_loss(t, dk, cfg: LossConfig) -> float:
    """Loss of the configured variant. TBYS ignores ``dk`` and uses its fixed profile."""
    v = cfg.variant
    if v is Variant.AP:
        return cyb_loss(t, dk, cfg)
    if v is Variant.TBYS:
        return cyb_loss(t, tbys_abstain(cfg.w_max), cfg)
    if v is Variant.VA:
        return cyb_va_loss(t, dk, cfg.rho)
    return cyb_dp_loss(t, dk, cfg.rho, cfg.alpha, cfg.gamma)


def readout_vjp(grad_s, dk, omega) -> np.ndarray:
    """Pull a gradient w.r.t. ``s`` back to ``dk``.

    With ``a_i = omega_i + (1 - d_i) T_i`` (``T_i`` the mass after step i) and
    ``P_i = prod_{j<i} d_j``, ``dL/dd_k = P_k (-c_k T_k + R_k)`` where
    ``R_k = sum_{i>k} c_i a_i prod_{k<j<i} d_j``, accumulated backwards without
    dividing by any ``d``.
    """
    omega = validate_prior(omega)
    dk = np.asarray(dk, dtype=np.float64)
    c = np.asarray(grad_s, dtype=np.float64)
    after = suffix_mass(omega) - omega
    a = omega + (1.0 - dk) * after
    prefix = _exclusive_cumprod(dk)
    w = dk.shape[-1]
    r = np.zeros_like(dk)
    for k in range(w - 2, -1, -1):
        r[..., k] = c[..., k + 1] * a[..., k + 1] + dk[..., k + 1] * r[..., k + 1]
    return prefix * (-c * after + r)


def loss_gradients(t, dk, cfg: LossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(dloss/dt, dloss/dd)`` of the configured variant.

    The last entry of ``dloss/dd`` is always 0 because ``d`` is pinned there.
    """
    w = cfg.w_max
    t = _as_targets(t, w)
    v = cfg.variant
    if v is Variant.TBYS:
        dk = tbys_abstain(w)
    dk = np.asarray(dk, dtype=np.float64)
    omega = cfg.omega if v in (Variant.AP, Variant.TBYS) else one_hot_prior(w)
    gamma = cfg.gamma if v in (Variant.AP, Variant.TBYS, Variant.DP) else np.ones(w)
    s = readout_distribution(dk, omega)

    if v is Variant.VA:
        rho = cfg.rho
        grad_t = -s / t
        with np.errstate(divide="ignore"):
            grad_s = -np.log(gamma * t) + np.log(s / rho) + 1.0
        grad_d = readout_vjp(grad_s, dk, omega)
    else:
        e = float(np.sum(s * gamma * t))
        if e <= UNDERFLOW_FLOOR:
            raise DegenerateLossError(f"expected discounted accuracy {e!r} at underflow floor")
        grad_t = -s * gamma / e
        grad_s = -gamma * t / e
        if v is Variant.DP and cfg.alpha != 0:
            with np.errstate(divide="ignore", invalid="ignore"):
                grad_s = grad_s - cfg.alpha * np.where(cfg.rho > 0, cfg.rho / s, 0.0)
        grad_d = readout_vjp(grad_s, dk, omega)

    if v is Variant.TBYS:
        grad_d = np.zeros(w)
    grad_d = np.asarray(grad_d, dtype=np.float64).copy()
    grad_d[..., -1] = 0.0
    return grad_t, grad_d
