"""Stopping-time process for a single output token.

Steps are 1-based in the math (step 1 is the real token, step ``i`` is the
(i-1)-th pause). Arrays are indexed from 0, so ``s[i - 1]`` is the probability
of reading out at step ``i``. Every function broadcasts over leading axes; the
step axis is always last.
"""

from __future__ import annotations

import numpy as np

SUM_TOL = 1e-9


def validate_prior(omega, tol: float = SUM_TOL) -> np.ndarray:
    """Check a stop-time distribution and return it renormalized in float64."""
    omega = np.asarray(omega, dtype=np.float64)
    if omega.ndim < 1 or omega.shape[-1] < 1:
        raise ValueError("prior must have at least one step")
    if np.any(~np.isfinite(omega)) or np.any(omega < 0):
        raise ValueError("prior entries must be finite and non-negative")
    total = omega.sum(axis=-1, keepdims=True)
    if np.any(np.abs(total - 1.0) > tol):
        raise ValueError(f"prior must sum to 1 (got {np.squeeze(total)})")
    return omega / total


def prior_from_ratio(ratio) -> np.ndarray:
    """Normalize a ratio such as ``"4:1:1:4"`` or ``[4, 1, 1, 4]`` to probabilities."""
    if isinstance(ratio, str):
        parts = [float(p) for p in ratio.split(":")]
    else:
        parts = [float(p) for p in ratio]
    arr = np.asarray(parts, dtype=np.float64)
    if arr.size == 0 or np.any(arr < 0) or arr.sum() <= 0:
        raise ValueError(f"invalid ratio {ratio!r}")
    return arr / arr.sum()


def one_hot_prior(w_max: int, step: int | None = None) -> np.ndarray:
    """All mass on ``step`` (default: the final step ``w_max``)."""
    step = w_max if step is None else step
    if not 1 <= step <= w_max:
        raise ValueError(f"step {step} outside 1..{w_max}")
    omega = np.zeros(w_max)
    omega[step - 1] = 1.0
    return omega


def _check_dk(dk, w_max: int) -> np.ndarray:
    dk = np.asarray(dk, dtype=np.float64)
    if dk.shape[-1] != w_max:
        raise ValueError(f"dimension mismatch: dk has {dk.shape[-1]} steps, prior has {w_max}")
    if np.any(dk < 0) or np.any(dk > 1):
        raise ValueError("dk entries must lie in [0, 1]")
    if np.any(dk[..., -1] != 0):
        raise ValueError("dk at the final step must be 0")
    return dk


def _exclusive_cumprod(x: np.ndarray) -> np.ndarray:
    # out[..., i] = prod_{j < i} x[..., j]
    ones = np.ones(x.shape[:-1] + (1,), dtype=x.dtype)
    return np.cumprod(np.concatenate([ones, x[..., :-1]], axis=-1), axis=-1)


def suffix_mass(omega: np.ndarray) -> np.ndarray:
    """``out[i] = sum_{j >= i} omega[j]``."""
    return np.flip(np.cumsum(np.flip(omega, -1), axis=-1), -1)


def hazard_from_prior(omega) -> np.ndarray:
    """Conditional termination probability Pr(W = i | W >= i).

    Steps with zero remaining mass are unreachable; their hazard is set to 1.
    """
    omega = validate_prior(omega)
    tail = suffix_mass(omega)
    with np.errstate(divide="ignore", invalid="ignore"):
        hazard = np.where(tail > 0, omega / np.where(tail > 0, tail, 1.0), 1.0)
    return np.clip(hazard, 0.0, 1.0)


def readout_distribution(dk, omega) -> np.ndarray:
    """Distribution of the step at which a result is emitted.

    ``s_i = (omega_i + (1 - d_i) * sum_{j>i} omega_j) * prod_{j<i} d_j``
    """
    omega = validate_prior(omega)
    dk = _check_dk(dk, omega.shape[-1])
    after = suffix_mass(omega) - omega
    s = (omega + (1.0 - dk) * after) * _exclusive_cumprod(dk)
    return s


def readout_distribution_hazard_form(dk, hazard) -> np.ndarray:
    """Same distribution written as a product of per-step survival terms."""
    hazard = np.asarray(hazard, dtype=np.float64)
    if np.any(hazard < 0) or np.any(hazard > 1):
        raise ValueError("hazard entries must lie in [0, 1]")
    dk = _check_dk(dk, hazard.shape[-1])
    survive = _exclusive_cumprod(dk) * _exclusive_cumprod(1.0 - hazard)
    return survive * (dk * hazard + (1.0 - dk))


def expected_latency(s) -> np.ndarray | float:
    """Expected number of pause steps consumed, ``sum_i (i - 1) s_i``."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < -1e-15) or np.any(np.abs(s.sum(axis=-1) - 1.0) > SUM_TOL):
        raise ValueError("s must be a probability vector")
    out = s @ np.arange(s.shape[-1], dtype=np.float64)
    return float(out) if np.ndim(out) == 0 else out


def sample_stop_steps(dk, omega, n: int, seed) -> np.ndarray:
    """Simulate ``n`` independent runs of the decision tree; returns 1-based stop steps.

    At each step the world first terminates with probability equal to the
    hazard; otherwise the model answers with probability ``1 - d_i`` or asks
    for another step.
    """
    omega = validate_prior(omega)
    w_max = omega.shape[-1]
    dk = _check_dk(dk, w_max)
    hazard = hazard_from_prior(omega)
    rng = np.random.default_rng(seed)
    world = rng.random((n, w_max)) < hazard
    answer = rng.random((n, w_max)) >= dk
    stop = world | answer
    stop[:, -1] = True
    return stop.argmax(axis=1) + 1


def sample_stop_step(dk, omega, seed) -> int:
    """One trajectory of the decision tree; returns the 1-based stop step."""
    return int(sample_stop_steps(dk, omega, 1, seed)[0])
