"""Layer-contrastive next-token distribution.

Given an expert distribution (final exit) and an amateur distribution
(intermediate exit) over the same vocabulary, build a replacement
distribution that keeps out-of-set probabilities untouched and
redistributes the in-set mass according to expert/amateur log-ratios.

All functions here are pure and operate on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Floor applied before taking logs; keeps the contrast score total.
PROB_FLOOR = 1e-12
# A probability vector must sum to 1 within this tolerance.
SUM_TOL = 1e-6


class InvalidDistributionError(ValueError):
    """Input vector is not a valid probability distribution."""


class ExpertSource(str, Enum):
    """Which final-layer head supplies the expert distribution."""

    ORIGINAL_HEAD = "original_head"
    NEW_HEAD = "new_head"


@dataclass(frozen=True)
class AcdConfig:
    """Configuration of the layer contrast: which exits, and how greedy the
    plausibility cutoff is."""

    expert_exit: int
    amateur_exit: int
    alpha: float = 0.1
    expert_source: ExpertSource = ExpertSource.ORIGINAL_HEAD

    def __post_init__(self) -> None:
        if self.amateur_exit >= self.expert_exit:
            raise ValueError(
                f"amateur exit ({self.amateur_exit}) must be strictly below "
                f"expert exit ({self.expert_exit})"
            )
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class PlausibleSet:
    """Token ids whose expert probability clears alpha * max(p_exp)."""

    indices: tuple[int, ...]
    alpha: float
    threshold: float

    def __contains__(self, token_id: int) -> bool:
        return token_id in set(self.indices)

    def __len__(self) -> int:
        return len(self.indices)


def validate_distribution(probs) -> np.ndarray:
    """Return ``probs`` as a float64 array, or raise InvalidDistributionError."""
    arr = np.asarray(probs, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidDistributionError("expected a non-empty 1-D probability vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidDistributionError("distribution contains NaN or Inf")
    if np.any(arr < 0):
        raise InvalidDistributionError("distribution contains negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > SUM_TOL:
        raise InvalidDistributionError(f"distribution sums to {total}, not 1")
    return arr


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax of a 1-D logit vector."""
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidDistributionError("logits contain NaN or Inf")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def plausible_set(p_exp, alpha: float) -> PlausibleSet:
    """Select the token ids whose expert probability is at least
    ``alpha * max(p_exp)``.  The comparison is inclusive, so the argmax token
    is always a member and the set is never empty."""
    p = validate_distribution(p_exp)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    threshold = alpha * float(p.max())
    indices = tuple(int(i) for i in np.flatnonzero(p >= threshold))
    return PlausibleSet(indices=indices, alpha=alpha, threshold=threshold)


def contrast_scores(p_exp, p_ama, pset: PlausibleSet) -> dict[int, float]:
    """Score each plausible token by ``log p_exp - log p_ama`` (natural log).

    Probabilities are floored at PROB_FLOOR before the log so a zero amateur
    probability yields a large finite score instead of a crash.
    """
    pe = validate_distribution(p_exp)
    pa = validate_distribution(p_ama)
    if pe.shape != pa.shape:
        raise InvalidDistributionError(
            f"expert/amateur length mismatch: {pe.size} vs {pa.size}"
        )
    scores: dict[int, float] = {}
    for i in pset.indices:
        e = max(pe[i], PROB_FLOOR)
        a = max(pa[i], PROB_FLOOR)
        scores[i] = float(np.log(e) - np.log(a))
    return scores


def redistribute(
    scores: dict[int, float], p_exp, pset: PlausibleSet
) -> dict[int, float]:
    """Softmax the contrast scores within the plausible set and scale by the
    set's expert probability mass, so the in-set mass is conserved."""
    if set(scores.keys()) != set(pset.indices):
        raise ValueError("scores must be keyed exactly by the plausible set")
    pe = validate_distribution(p_exp)
    mass = float(pe[list(pset.indices)].sum())
    values = np.array([scores[i] for i in pset.indices], dtype=np.float64)
    weights = softmax(values)
    return {i: float(w * mass) for i, w in zip(pset.indices, weights)}


def acd_distribution(p_exp, p_ama, alpha: float) -> np.ndarray:
    """Full contrastive replacement distribution.

    In-set entries get the redistributed mass; every other entry keeps the
    expert probability unchanged.  A singleton plausible set returns the
    expert distribution exactly, so a dominant expert token can never be
    overridden by the amateur.
    """
    pe = validate_distribution(p_exp)
    pa = validate_distribution(p_ama)
    if pe.shape != pa.shape:
        raise InvalidDistributionError(
            f"expert/amateur length mismatch: {pe.size} vs {pa.size}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    # vectorized equivalent of plausible_set -> contrast_scores -> redistribute
    # (those stay the reference path; equivalence is covered by tests)
    mask = pe >= alpha * pe.max()
    if int(mask.sum()) == 1:
        return pe.copy()
    scores = np.log(np.maximum(pe[mask], PROB_FLOOR)) - np.log(
        np.maximum(pa[mask], PROB_FLOOR)
    )
    out = pe.copy()
    out[mask] = softmax(scores) * pe[mask].sum()
    return out


def acd_distribution_from_logits(exp_logits, ama_logits, alpha: float) -> np.ndarray:
    """Convenience wrapper: stable softmax on both logit vectors first."""
    return acd_distribution(softmax(exp_logits), softmax(ama_logits), alpha)
