"""Exploration-function guided policies: renormalise over allowed actions, or
keep the original distribution when nothing allowed has probability mass."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .types import ActionMask

log = logging.getLogger(__name__)

_PROB_TOL = 1e-9


class NumericError(ArithmeticError):
    pass


class FallbackCounter:
    """Counts all-masked fallbacks; frequent fallback means a degenerate mask."""

    def __init__(self) -> None:
        self.count = 0

    def add(self, n: int) -> None:
        if n:
            self.count += int(n)
            log.debug("exploration mask fell back to the raw policy %d time(s)", n)


FALLBACKS = FallbackCounter()


@dataclass(frozen=True)
class ActionDistribution:
    probs: np.ndarray
    log_probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError("ActionDistribution expects a 1-D probability vector")
        if np.isnan(p).any():
            raise NumericError("NaN in action probabilities")
        if (p < 0).any() or abs(p.sum() - 1.0) > _PROB_TOL:
            raise ValueError("probabilities must be nonnegative and sum to 1")

    @classmethod
    def from_probs(cls, probs) -> "ActionDistribution":
        p = np.asarray(probs, dtype=np.float64)
        with np.errstate(divide="ignore"):
            return cls(p, np.log(p))

    @classmethod
    def from_logits(cls, logits) -> "ActionDistribution":
        z = np.asarray(logits, dtype=np.float64)
        z = z - z.max()
        logp = z - np.log(np.exp(z).sum())
        return cls(np.exp(logp), logp)

    def __len__(self) -> int:
        return len(self.probs)


def apply_mask(dist: ActionDistribution, mask: ActionMask | np.ndarray) -> ActionDistribution:
    allow = mask.as_array() if isinstance(mask, ActionMask) else np.asarray(mask, dtype=bool)
    if allow.shape != dist.probs.shape:
        raise ValueError(f"mask length {allow.size} does not match {dist.probs.size} actions")
    if allow.all():
        return dist
    kept = dist.probs * allow
    z = kept.sum()
    if z <= 0:
        FALLBACKS.add(1)
        return dist
    with np.errstate(divide="ignore"):
        logp = np.where(allow, dist.log_probs - np.log(z), -np.inf)
    return ActionDistribution(kept / z, logp)


def sample(dist: ActionDistribution, rng: np.random.Generator) -> tuple[int, float]:
    """Inverse-CDF draw; returns (index, log-probability under ``dist``)."""
    p = dist.probs
    if np.isnan(p).any():
        raise NumericError("NaN in action probabilities")
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    # first index with cdf > u; zero-probability actions have empty intervals
    idx = int(np.searchsorted(cdf, u, side="right"))
    idx = min(idx, int(np.flatnonzero(p > 0)[-1]))
    return idx, float(dist.log_probs[idx])


# -- batched forms used by the trainer ------------------------------------


def masked_log_softmax(logits: np.ndarray, allow: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log pi_E for logits (..., A) and a boolean mask (..., A).

    Rows whose allowed set carries no probability mass keep the raw policy.
    Returns (log_probs, fallback_rows).
    """
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    if allow is None:
        return logp, np.zeros(logits.shape[:-1], dtype=bool)
    allow = np.asarray(allow, dtype=bool)
    if allow.all():
        return logp, np.zeros(logits.shape[:-1], dtype=bool)
    p = np.exp(logp)
    mass = (p * allow).sum(axis=-1, keepdims=True)
    fallback = mass[..., 0] <= 0
    eff = allow | fallback[..., None]
    with np.errstate(divide="ignore"):
        masked = np.where(eff, logp - np.log(np.where(fallback[..., None], 1.0, mass)), -np.inf)
    FALLBACKS.add(int(fallback.sum()))
    return masked, fallback


def sample_batch(log_probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling of one action per row of (..., A) log-probabilities."""
    p = np.exp(log_probs)
    if np.isnan(p).any():
        raise NumericError("NaN in action probabilities")
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(p.shape[:-1])[..., None] * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    # guard u rounding up to the total: fall back to the last positive action
    last = p.shape[-1] - 1 - np.argmax((p > 0)[..., ::-1], axis=-1)
    return np.minimum(idx, last)
