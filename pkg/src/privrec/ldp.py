"""Randomized-response perturbation of binary implicit feedback."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .dataset import UserItemSets


@dataclass(frozen=True)
class LdpSpec:
    epsilon: float
    seed: int = 0

    def __post_init__(self):
        _check_epsilon(self.epsilon)

    def fingerprint(self) -> str:
        return hashlib.sha256(f"ldp:{self.epsilon!r}:{self.seed}".encode()).hexdigest()[:16]


def _check_epsilon(epsilon: float) -> None:
    if not (isinstance(epsilon, (int, float)) and math.isfinite(epsilon) and epsilon > 0):
        raise ValueError(f"epsilon must be a positive finite number, got {epsilon!r}")


def flip_probabilities(epsilon: float) -> tuple[float, float]:
    """Return (keep probability for a positive, add probability for a non-positive).

    The keep probability is 1/(e^eps+1) + (e^eps-1)/(e^eps+1), which simplifies
    to e^eps/(e^eps+1); the two always sum to one.
    """
    _check_epsilon(epsilon)
    # expit form stays accurate for large epsilon where e^eps overflows
    p_neg = 1.0 / (1.0 + math.exp(epsilon)) if epsilon < 700 else 0.0
    p_pos = 1.0 / (1.0 + math.exp(-epsilon))
    return p_pos, p_neg


def perturb_user(items: np.ndarray, num_items: int, p_pos: float, p_neg: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb one user's positive set.

    Additions are drawn as a Binomial count over the non-positive candidates
    followed by a uniform sample of that many candidates, which has the same
    distribution as one coin per candidate.
    """
    kept = items[rng.random(len(items)) < p_pos]
    n_cand = num_items - len(items)
    k = rng.binomial(n_cand, p_neg) if n_cand > 0 else 0
    if k == 0:
        return np.sort(kept)
    mask = np.ones(num_items, dtype=bool)
    mask[items] = False
    candidates = np.flatnonzero(mask)
    added = rng.choice(candidates, size=k, replace=False)
    return np.sort(np.concatenate([kept, added]))


def perturb_user_naive(items: np.ndarray, num_items: int, p_pos: float, p_neg: float, rng: np.random.Generator) -> np.ndarray:
    """Reference path: one independent coin per (user, item) pair."""
    positive = np.zeros(num_items, dtype=bool)
    positive[items] = True
    coins = rng.random(num_items)
    return np.flatnonzero(np.where(positive, coins < p_pos, coins < p_neg))


def perturb_training_set(train: UserItemSets, spec: LdpSpec) -> UserItemSets:
    """Perturb every user's training positives; held-out sets are never touched."""
    p_pos, p_neg = flip_probabilities(spec.epsilon)
    rows = [
        perturb_user(train.items(u), train.num_items, p_pos, p_neg, np.random.default_rng([spec.seed, u]))
        for u in range(train.num_users)
    ]
    return UserItemSets.from_lists(rows, train.num_items)
