"""Execution-time safety enforcement, decoupled from learning.

Two pure operations: projecting a proposed action onto the state's safe
set (nearest safe action in embedding space) and renormalizing a policy
distribution onto the safe set. Both are stateless and safe under any
concurrency.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import SafetySpec, safe_actions

# Below this much total probability on the safe set, renormalization is
# numerically starved and falls back to uniform-over-safe.
STARVATION_EPS = 1e-12

DISTRIBUTION_ATOL = 1e-9


@dataclass(frozen=True)
class ProjectionResult:
    """Outcome of projecting one proposed action.

    distance is the squared embedding distance between the raw and the
    executed action; was_modified false implies distance 0 and an
    unchanged action.
    """

    exec_action: int
    was_modified: bool
    distance: float


def project_action(s: int, a_raw: int, spec: SafetySpec) -> ProjectionResult:
    """Nearest safe action to a_raw in squared embedding distance.

    Ties break toward the lowest action id. Idempotent: projecting the
    executed action returns it unmodified (embeddings are pairwise
    distinct, so a safe action is its own unique minimizer).
    """
    if not 0 <= a_raw < spec.num_actions:
        raise ValueError(f"action {a_raw} out of range [0, {spec.num_actions})")
    candidates = safe_actions(spec, s)
    diffs = spec.action_embedding[candidates] - spec.action_embedding[a_raw]
    sq_dists = np.einsum("ij,ij->i", diffs, diffs)
    best = int(candidates[np.argmin(sq_dists)])
    return ProjectionResult(
        exec_action=best,
        was_modified=best != a_raw,
        distance=float(np.min(sq_dists)),
    )


def check_distribution(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError(f"distribution must be 1-D, got shape {probs.shape}")
    if np.any(probs < 0.0) or not np.all(np.isfinite(probs)):
        raise ValueError("distribution entries must be finite and non-negative")
    total = float(probs.sum())
    if abs(total - 1.0) > DISTRIBUTION_ATOL:
        raise ValueError(f"distribution sums to {total}, expected 1 within {DISTRIBUTION_ATOL}")
    return probs


def renormalize_policy_safe(
    probs: np.ndarray, s: int, spec: SafetySpec
) -> tuple[np.ndarray, bool]:
    """Restrict a policy distribution to the safe set and renormalize.

    Returns (safe_probs, starved). Each safe action gets
    p(a) / sum_{safe a''} p(a''); unsafe actions get 0. When the safe
    mass is below STARVATION_EPS (the learner has concentrated on unsafe
    actions), falls back to uniform over the safe set and flags the
    event so callers can count it.
    """
    probs = check_distribution(probs)
    if probs.shape[0] != spec.num_actions:
        raise ValueError(f"distribution has {probs.shape[0]} entries, spec has {spec.num_actions} actions")
    mask = spec.safe[s]
    masked = np.where(mask, probs, 0.0)
    total = float(masked.sum())
    if total < STARVATION_EPS:
        uniform = mask.astype(np.float64)
        return uniform / uniform.sum(), True
    return masked / total, False


def safe_entropy(probs: np.ndarray) -> float:
    """Shannon entropy in nats with the 0 * log 0 = 0 convention."""
    probs = check_distribution(probs)
    positive = probs[probs > 0.0]
    return float(-np.sum(positive * np.log(positive)))
