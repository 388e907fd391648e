"""Ranking utility (NDCG@k) and popularity/calibration/fairness bias metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataset import USER_TYPES, SegmentMap, SplitDataset, UserItemSets

METRIC_NAMES = ("ndcg", "kld", "popularity_lift", "novelty", "coverage", "dpf")
ITEM_GROUPS = ("I1", "I2")


def ndcg_at_k(rec: Sequence[int], relevant, k: int) -> float:
    """Binary-relevance NDCG of the first ``k`` entries of ``rec``."""
    relevant = set(int(i) for i in relevant)
    if not relevant:
        return 0.0
    rec = list(rec)[:k]
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    dcg = sum(discounts[pos] for pos, item in enumerate(rec) if int(item) in relevant)
    idcg = discounts[: min(k, len(relevant))].sum()
    return float(dcg / idcg)


class CategoryIndex:
    """Maps items to category-id arrays with uniform per-item mass."""

    def __init__(self, categories: Sequence[Sequence[str]]):
        labels = sorted({c for cats in categories for c in cats})
        self.labels = tuple(labels)
        lookup = {c: n for n, c in enumerate(labels)}
        self.item_cats = [np.array(sorted({lookup[c] for c in cats}), dtype=np.int64) for cats in categories]

    def distribution(self, items: Sequence[int], weights: Sequence[float] | None = None) -> np.ndarray:
        """sum_i w_i p(z|i) / sum_i w_i with p(z|i) uniform over item i's categories."""
        out = np.zeros(len(self.labels))
        weights = np.ones(len(items)) if weights is None else np.asarray(weights, dtype=float)
        for item, w in zip(items, weights):
            cats = self.item_cats[int(item)]
            out[cats] += w / len(cats)
        total = weights.sum()
        return out / total if total > 0 else out


def rank_weights(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def kld_miscalibration(
    history: Sequence[int],
    rec: Sequence[int],
    categories: CategoryIndex | Sequence[Sequence[str]],
    alpha: float = 0.01,
    rank_weighted: bool = False,
) -> float:
    """KL(p || (1 - alpha) q + alpha p), natural log, over categories with p > 0."""
    index = categories if isinstance(categories, CategoryIndex) else CategoryIndex(categories)
    p = index.distribution(history)
    q = index.distribution(rec, rank_weights(len(rec)) if rank_weighted else None)
    q_tilde = (1.0 - alpha) * q + alpha * p
    support = p > 0
    return float(np.sum(p[support] * np.log(p[support] / q_tilde[support])))


def gap(lists: Sequence[Sequence[int]], popularity: np.ndarray) -> float:
    """Mean over users of the mean item popularity in each user's list."""
    if len(lists) == 0:
        raise ValueError("empty group")
    if any(len(items) == 0 for items in lists):
        raise ValueError("every user in the group needs a nonempty list")
    return float(np.mean([popularity[np.asarray(items, dtype=np.int64)].mean() for items in lists]))


def popularity_lift(profiles: Sequence[Sequence[int]], recs: Sequence[Sequence[int]], popularity: np.ndarray) -> float:
    gap_p = gap(profiles, popularity)
    if gap_p <= 0:
        raise FloatingPointError("profile group average popularity is zero")
    return (gap(recs, popularity) - gap_p) / gap_p


def novelty(rec: Sequence[int], popularity: np.ndarray) -> float:
    if len(rec) == 0:
        raise ValueError("empty recommendation list")
    return float(np.mean(-np.log(popularity[np.asarray(rec, dtype=np.int64)])))


def coverage(item_set: Sequence[int], all_recs: Sequence[Sequence[int]]) -> float:
    item_set = np.asarray(item_set, dtype=np.int64)
    if item_set.size == 0:
        raise ValueError("empty item set")
    shown = np.concatenate([np.asarray(r, dtype=np.int64) for r in all_recs]) if len(all_recs) else np.zeros(0, np.int64)
    return float(np.isin(item_set, shown).mean())


def dpf(head: Sequence[int], tail: Sequence[int], all_recs: Sequence[Sequence[int]]) -> float:
    return coverage(head, all_recs) - coverage(tail, all_recs)


@dataclass
class MetricsReport:
    ndcg: float | None
    kld: float | None
    popularity_lift: float | None
    novelty: float | None
    coverage: float | None
    dpf: float | None
    k: int
    by_user_type: dict[str, dict[str, float | None]] = field(default_factory=dict)
    by_item_group: dict[str, dict[str, float | None]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**d)

    def flat(self) -> dict[str, float | None]:
        """One flat record: ``metric`` for overall values, ``group.metric`` for breakdowns."""
        out: dict[str, float | None] = {m: getattr(self, m) for m in METRIC_NAMES}
        for group, values in {**self.by_user_type, **self.by_item_group}.items():
            for m, v in values.items():
                out[f"{group}.{m}"] = v
        return out


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _group_metrics(users, recs, test, profiles, popularity, index, k, head, tail, alpha, rank_weighted):
    """All six metrics over one user group; None where the group gives nothing to average."""
    users = list(users)
    if not users:
        return dict.fromkeys(METRIC_NAMES)
    nonempty = [u for u in users if len(recs[u])]
    ndcgs = [ndcg_at_k(recs[u], test.items(u), k) for u in users if len(test.items(u))]
    klds = [kld_miscalibration(profiles[u], recs[u], index, alpha, rank_weighted) for u in nonempty if len(profiles[u])]
    with_profile = [u for u in nonempty if len(profiles[u])]
    group_recs = [recs[u] for u in users]
    return {
        "ndcg": _mean(ndcgs),
        "kld": _mean(klds),
        "popularity_lift": popularity_lift([profiles[u] for u in with_profile], [recs[u] for u in with_profile], popularity)
        if with_profile else None,
        "novelty": _mean([novelty(recs[u], popularity) for u in nonempty]),
        "coverage": coverage(np.arange(len(popularity)), group_recs),
        "dpf": dpf(head, tail, group_recs) if len(head) and len(tail) else None,
    }


def evaluate_lists(
    recs: Sequence[np.ndarray],
    recs_by_group: dict[str, Sequence[np.ndarray]],
    split: SplitDataset,
    segments: SegmentMap,
    categories: CategoryIndex | Sequence[Sequence[str]],
    k: int = 10,
    alpha: float = 0.01,
    rank_weighted: bool = False,
) -> MetricsReport:
    """Metrics from precomputed top-k lists.

    ``recs_by_group`` holds lists ranked only among I1 (resp. I2) items; the
    item-group NDCG uses them with relevance restricted to the group's test items.
    """
    index = categories if isinstance(categories, CategoryIndex) else CategoryIndex(categories)
    popularity = segments.popularity
    head, tail = segments.head_items, segments.tail_items
    test = split.test
    profiles = [split.train.items(u) for u in range(test.num_users)]
    all_users = range(test.num_users)

    overall = _group_metrics(all_users, recs, test, profiles, popularity, index, k, head, tail, alpha, rank_weighted)
    report = MetricsReport(**overall, k=k)
    report.counts = {
        "users": test.num_users,
        "users_with_test": int(sum(1 for u in all_users if len(test.items(u)))),
        "items": len(popularity),
        "head_items": len(head),
    }

    for label in USER_TYPES:
        users = segments.users_of_type(label)
        report.counts[f"{label}_users"] = len(users)
        if len(users) == 0:
            report.flags.append(f"empty user group {label}")
        report.by_user_type[label] = _group_metrics(users, recs, test, profiles, popularity, index, k, head, tail, alpha, rank_weighted)

    for name, mask in (("I1", segments.head), ("I2", ~segments.head)):
        glists = recs_by_group.get(name)
        group_items = np.flatnonzero(mask)
        values: dict[str, float | None] = dict.fromkeys(("ndcg", "kld", "popularity_lift", "novelty", "coverage"))
        values["coverage"] = coverage(group_items, recs)
        if glists is not None:
            ndcgs, klds, profs, lists = [], [], [], []
            for u in all_users:
                rel = [i for i in test.items(u) if mask[i]]
                if rel:
                    ndcgs.append(ndcg_at_k(glists[u], rel, k))
                if len(glists[u]) and len(profiles[u]):
                    klds.append(kld_miscalibration(profiles[u], glists[u], index, alpha, rank_weighted))
                prof = [i for i in profiles[u] if mask[i]]
                if prof and len(glists[u]):
                    profs.append(prof)
                    lists.append(glists[u])
            values["ndcg"] = _mean(ndcgs)
            values["kld"] = _mean(klds)
            values["popularity_lift"] = popularity_lift(profs, lists, popularity) if profs else None
            values["novelty"] = _mean([novelty(r, popularity) for r in glists if len(r)])
        report.by_item_group[name] = values
    return report


def evaluate(
    model,
    split: SplitDataset,
    segments: SegmentMap,
    categories: Sequence[Sequence[str]],
    k: int = 10,
    history: UserItemSets | None = None,
    alpha: float = 0.01,
    rank_weighted: bool = False,
) -> MetricsReport:
    """Rank all non-training items for every user and compute the full report.

    ``history`` is the model input for history-conditioned models (the
    perturbed training set under local DP); exclusion always uses the true
    training positives.
    """
    from .models import recommend_all

    history = split.train if history is None else history
    lists = recommend_all(model, k, split.train, history, item_masks={"I1": segments.head, "I2": ~segments.head})
    report = evaluate_lists(lists["all"], {"I1": lists["I1"], "I2": lists["I2"]}, split, segments, categories, k, alpha, rank_weighted)
    short = sum(1 for r in lists["all"] if len(r) < k)
    if short:
        report.flags.append(f"{short} users with fewer than {k} candidates")
    return report

