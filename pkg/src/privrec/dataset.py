"""Loading, cleaning, splitting and segmenting MovieLens-1M and Yelp interactions."""
from __future__ import annotations

import datetime as _dt
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STORE_FORMAT = "privrec-store"
STORE_VERSION = 1

# At most this fraction of malformed lines is tolerated before parsing aborts.
MAX_ERROR_FRACTION = 0.01

NICHE = "niche"
DIVERSE = "diverse"
BLOCKBUSTER = "blockbuster"
USER_TYPES = (NICHE, DIVERSE, BLOCKBUSTER)


class DataError(ValueError):
    """Raised when input data cannot be turned into a usable store."""


@dataclass(frozen=True)
class RawRating:
    user_id: str
    item_id: str
    rating: int
    timestamp: int | None = None


@dataclass
class ParseReport:
    source: str
    lines: int = 0
    errors: list[tuple[int, str]] = field(default_factory=list)

    def add(self, line_no: int, reason: str) -> None:
        self.errors.append((line_no, reason))

    @property
    def error_fraction(self) -> float:
        return len(self.errors) / self.lines if self.lines else 0.0

    def check(self) -> None:
        if self.error_fraction > MAX_ERROR_FRACTION:
            first = "; ".join(f"line {n}: {r}" for n, r in self.errors[:5])
            raise DataError(
                f"{self.source}: {len(self.errors)} of {self.lines} lines malformed "
                f"({self.error_fraction:.2%} > {MAX_ERROR_FRACTION:.0%}); first: {first}"
            )


@dataclass(frozen=True)
class ParsedData:
    ratings: list[RawRating]
    categories: dict[str, tuple[str, ...]]
    report: ParseReport


class UserItemSets:
    """Per-user sorted item-index sets in CSR layout."""

    __slots__ = ("indptr", "indices", "num_items")

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, num_items: int):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.num_items = int(num_items)

    @classmethod
    def from_lists(cls, lists: Sequence[Iterable[int]], num_items: int) -> "UserItemSets":
        rows = [np.unique(np.fromiter(items, dtype=np.int64)) for items in lists]
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(r) for r in rows])
        indices = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        return cls(indptr, indices, num_items)

    @property
    def num_users(self) -> int:
        return len(self.indptr) - 1

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    def items(self, user: int) -> np.ndarray:
        return self.indices[self.indptr[user] : self.indptr[user + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def user_of_entry(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_users), self.counts())

    def dense(self, users: np.ndarray | None = None) -> np.ndarray:
        users = np.arange(self.num_users) if users is None else np.asarray(users)
        out = np.zeros((len(users), self.num_items))
        for row, u in enumerate(users):
            out[row, self.items(u)] = 1.0
        return out

    def contains(self, user: int, items: np.ndarray) -> np.ndarray:
        row = self.items(user)
        pos = np.searchsorted(row, items)
        pos = np.minimum(pos, max(len(row) - 1, 0))
        return (row[pos] == items) if len(row) else np.zeros(len(items), dtype=bool)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UserItemSets):
            return NotImplemented
        return (
            self.num_items == other.num_items
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    def __repr__(self) -> str:
        return f"UserItemSets(users={self.num_users}, items={self.num_items}, nnz={self.nnz})"


@dataclass(frozen=True, eq=False)
class InteractionStore:
    positives: UserItemSets
    timestamps: np.ndarray  # aligned with positives.indices; -1 when unknown
    categories: tuple[tuple[str, ...], ...]
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return self.positives.nnz

    def user_index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.user_ids)}

    def item_index(self) -> dict[str, int]:
        return {it: i for i, it in enumerate(self.item_ids)}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InteractionStore):
            return NotImplemented
        return (
            self.positives == other.positives
            and np.array_equal(self.timestamps, other.timestamps)
            and self.categories == other.categories
            and self.user_ids == other.user_ids
            and self.item_ids == other.item_ids
        )

    def stats(self) -> dict[str, float]:
        """Summary in the layout of the dataset statistics table."""
        ncat = np.array([len(c) for c in self.categories])
        labels = {c for cats in self.categories for c in cats}
        return {
            "users": self.num_users,
            "items": self.num_items,
            "interactions": self.num_interactions,
            "density": self.num_interactions / (self.num_users * self.num_items),
            "categories": len(labels),
            "min_categories_per_item": int(ncat.min()),
            "max_categories_per_item": int(ncat.max()),
            "mean_categories_per_item": float(ncat.mean()),
        }


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: UserItemSets
    valid: UserItemSets
    test: UserItemSets
    seed: int


@dataclass(frozen=True, eq=False)
class SegmentMap:
    popularity: np.ndarray
    head: np.ndarray  # bool per item, True for the short head I1
    user_type: tuple[str, ...]
    head_threshold_rank: int

    @property
    def head_items(self) -> np.ndarray:
        return np.flatnonzero(self.head)

    @property
    def tail_items(self) -> np.ndarray:
        return np.flatnonzero(~self.head)

    def users_of_type(self, label: str) -> np.ndarray:
        return np.array([u for u, t in enumerate(self.user_type) if t == label], dtype=np.int64)


# ---------------------------------------------------------------- parsing


def _valid_rating(value: float) -> int:
    if value != int(value) or not 1 <= value <= 5:
        raise ValueError(f"rating {value!r} outside 1..5")
    return int(value)


def parse_movielens(ratings_path: str | Path, movies_path: str | Path) -> ParsedData:
    ratings_path, movies_path = Path(ratings_path), Path(movies_path)
    for p in (ratings_path, movies_path):
        if not p.is_file():
            raise FileNotFoundError(p)

    categories: dict[str, tuple[str, ...]] = {}
    with movies_path.open(encoding="latin-1") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) < 3:
                continue
            genres = tuple(g for g in parts[-1].split("|") if g)
            if genres:
                categories[parts[0]] = genres

    report = ParseReport(source=str(ratings_path))
    ratings: list[RawRating] = []
    with ratings_path.open(encoding="latin-1") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            report.lines += 1
            parts = line.split("::")
            if len(parts) not in (3, 4):
                report.add(line_no, f"expected 4 fields, got {len(parts)}")
                continue
            try:
                rating = _valid_rating(float(parts[2]))
                ts = int(parts[3]) if len(parts) == 4 and parts[3] else None
            except ValueError as exc:
                report.add(line_no, str(exc))
                continue
            if not parts[0] or not parts[1]:
                report.add(line_no, "empty id")
                continue
            ratings.append(RawRating(parts[0], parts[1], rating, ts))
    report.check()
    return ParsedData(ratings, categories, report)


def _yelp_timestamp(value) -> int | None:
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return int(value)
    try:
        t = _dt.datetime.fromisoformat(str(value))
    except ValueError:
        return None
    if t.tzinfo is None:
        t = t.replace(tzinfo=_dt.timezone.utc)
    return int(t.timestamp())


def parse_yelp(review_path: str | Path, business_path: str | Path, state_filter: str = "AZ") -> ParsedData:
    review_path, business_path = Path(review_path), Path(business_path)
    if not business_path.is_file():
        raise FileNotFoundError(business_path)
    if not review_path.is_file():
        raise FileNotFoundError(review_path)

    breport = ParseReport(source=str(business_path))
    categories: dict[str, tuple[str, ...]] = {}
    with business_path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            breport.lines += 1
            try:
                rec = json.loads(line)
                bid, state = rec["business_id"], rec["state"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                breport.add(line_no, f"bad business record: {exc}")
                continue
            if state != state_filter:
                continue
            labels = tuple(c.strip() for c in (rec.get("categories") or "").split(",") if c.strip())
            if labels:
                categories[bid] = labels
    breport.check()

    report = ParseReport(source=str(review_path))
    ratings: list[RawRating] = []
    with review_path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            report.lines += 1
            try:
                rec = json.loads(line)
                uid, bid, stars = rec["user_id"], rec["business_id"], rec["stars"]
                rating = _valid_rating(float(stars))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                report.add(line_no, f"bad review record: {exc}")
                continue
            if bid in categories:
                ratings.append(RawRating(str(uid), str(bid), rating, _yelp_timestamp(rec.get("date"))))
    report.check()
    return ParsedData(ratings, categories, report)


# ---------------------------------------------------------- preprocessing


def _id_key(s: str):
    return (0, int(s), "") if s.isdigit() else (1, 0, s)


def preprocess(
    raw: Sequence[RawRating],
    categories: dict[str, Sequence[str]],
    min_rating: int = 3,
    min_count: int = 5,
) -> InteractionStore:
    """Keep ratings >= ``min_rating`` and filter items and users with fewer than
    ``min_count`` ratings until nothing else is removed.

    Duplicate (user, item) pairs keep the latest rating. Items without a
    category are dropped. Indices are assigned in natural external-id order.
    """
    if not raw:
        raise DataError("no ratings to preprocess")

    latest: dict[tuple[str, str], RawRating] = {}
    for r in raw:
        key = (r.user_id, r.item_id)
        prev = latest.get(key)
        if prev is None or (r.timestamp or -1) >= (prev.timestamp or -1):
            latest[key] = r
    kept = [r for r in latest.values() if r.rating >= min_rating and categories.get(r.item_id)]
    n_positive = len(kept)

    rounds = 0
    while True:
        rounds += 1
        item_n = Counter(r.item_id for r in kept)
        user_n = Counter(r.user_id for r in kept)
        nxt = [r for r in kept if item_n[r.item_id] >= min_count and user_n[r.user_id] >= min_count]
        if len(nxt) == len(kept):
            break
        kept = nxt

    if not kept:
        raise DataError(
            f"empty store after filtering: {len(raw)} raw ratings, {len(latest)} unique pairs, "
            f"{n_positive} with rating >= {min_rating}, 0 after {rounds} min-{min_count} rounds"
        )

    user_ids = tuple(sorted({r.user_id for r in kept}, key=_id_key))
    item_ids = tuple(sorted({r.item_id for r in kept}, key=_id_key))
    uix = {u: i for i, u in enumerate(user_ids)}
    iix = {it: i for i, it in enumerate(item_ids)}

    u = np.array([uix[r.user_id] for r in kept], dtype=np.int64)
    i = np.array([iix[r.item_id] for r in kept], dtype=np.int64)
    ts = np.array([-1 if r.timestamp is None else r.timestamp for r in kept], dtype=np.int64)
    order = np.lexsort((i, u))
    u, i, ts = u[order], i[order], ts[order]
    indptr = np.zeros(len(user_ids) + 1, dtype=np.int64)
    np.add.at(indptr, u + 1, 1)
    indptr = np.cumsum(indptr)

    cats = tuple(tuple(categories[it]) for it in item_ids)
    return InteractionStore(UserItemSets(indptr, i, len(item_ids)), ts, cats, user_ids, item_ids)


def expand_to_ratings(store: InteractionStore, rating: int = 5) -> tuple[list[RawRating], dict[str, tuple[str, ...]]]:
    """Turn a store back into raw ratings (all positives) plus item categories."""
    users = store.positives.user_of_entry()
    out = [
        RawRating(
            store.user_ids[u],
            store.item_ids[it],
            rating,
            None if t < 0 else int(t),
        )
        for u, it, t in zip(users, store.positives.indices, store.timestamps)
    ]
    return out, {store.item_ids[k]: c for k, c in enumerate(store.categories)}


def subsample_users(
    raw: Sequence[RawRating],
    categories: dict[str, Sequence[str]],
    max_users: int,
    seed: int = 0,
    min_rating: int = 3,
    min_count: int = 5,
) -> InteractionStore:
    """Preprocess, keep a seeded uniform sample of ``max_users`` users, preprocess again."""
    store = preprocess(raw, categories, min_rating, min_count)
    if store.num_users <= max_users:
        return store
    rng = np.random.default_rng(seed)
    keep = {store.user_ids[u] for u in rng.choice(store.num_users, size=max_users, replace=False)}
    sub, cats = expand_to_ratings(store)
    return preprocess([r for r in sub if r.user_id in keep], cats, min_rating, min_count)


# ---------------------------------------------------------------- splitting


def split_counts(n: int, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> tuple[int, int, int]:
    """(train, valid, test) sizes for a user with ``n`` positives.

    Valid and test each get floor(ratio * n); when that is zero for both but a
    holdout fits, validation gets one item since early stopping needs it.
    """
    n_valid = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    if n_valid == 0 and n >= 2:
        n_valid = 1
    return n - n_valid - n_test, n_valid, n_test


def split_per_user(
    store: InteractionStore,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitDataset:
    train, valid, test = [], [], []
    for u in range(store.num_users):
        items = store.positives.items(u)
        n_train, n_valid, _ = split_counts(len(items), ratios)
        if n_train < 1:
            raise DataError(f"user {store.user_ids[u]} has too few positives to split ({len(items)})")
        shuffled = np.random.default_rng([seed, u]).permutation(items)
        train.append(shuffled[:n_train])
        valid.append(shuffled[n_train : n_train + n_valid])
        test.append(shuffled[n_train + n_valid :])
    n = store.num_items
    return SplitDataset(
        UserItemSets.from_lists(train, n),
        UserItemSets.from_lists(valid, n),
        UserItemSets.from_lists(test, n),
        seed,
    )


# -------------------------------------------------------------- segmenting


def user_type_for(head_fraction: float) -> str:
    if head_fraction < 0.5:
        return NICHE
    if head_fraction > 0.85:
        return BLOCKBUSTER
    return DIVERSE


def segment(store: InteractionStore, split: SplitDataset, head_share: float = 0.2) -> SegmentMap:
    n_users, n_items = store.num_users, store.num_items
    counts = np.bincount(split.train.indices, minlength=n_items).astype(float)
    popularity = counts / n_users
    popularity[counts == 0] = 1.0 / (n_users + 1)

    cutoff = math.ceil(head_share * n_items)
    order = np.lexsort((np.arange(n_items), -popularity))
    head = np.zeros(n_items, dtype=bool)
    head[order[:cutoff]] = True

    labels = []
    for u in range(n_users):
        items = store.positives.items(u)
        labels.append(user_type_for(head[items].mean()))
    return SegmentMap(popularity, head, tuple(labels), cutoff)


# ------------------------------------------------------------------- cache


def save_store(store: InteractionStore, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": STORE_FORMAT, "version": STORE_VERSION,
                             "num_users": store.num_users, "num_items": store.num_items}) + "\n")
        for k, it in enumerate(store.item_ids):
            fh.write(json.dumps({"item": it, "categories": list(store.categories[k])}) + "\n")
        for u, uid in enumerate(store.user_ids):
            lo, hi = store.positives.indptr[u], store.positives.indptr[u + 1]
            fh.write(json.dumps({
                "user": uid,
                "items": store.positives.indices[lo:hi].tolist(),
                "timestamps": store.timestamps[lo:hi].tolist(),
            }) + "\n")
    tmp.replace(path)


def load_store(path: str | Path) -> InteractionStore | None:
    """Read a cached store; returns None when the cache is missing or stale."""
    path = Path(path)
    if not path.is_file():
        return None
    with path.open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != STORE_FORMAT or header.get("version") != STORE_VERSION:
            return None
        item_ids, cats, user_ids, rows, stamps = [], [], [], [], []
        for _ in range(header["num_items"]):
            rec = json.loads(fh.readline())
            item_ids.append(rec["item"])
            cats.append(tuple(rec["categories"]))
        for _ in range(header["num_users"]):
            rec = json.loads(fh.readline())
            user_ids.append(rec["user"])
            rows.append(rec["items"])
            stamps.extend(rec["timestamps"])
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.array([i for r in rows for i in r], dtype=np.int64)
    return InteractionStore(
        UserItemSets(indptr, indices, len(item_ids)),
        np.array(stamps, dtype=np.int64),
        tuple(cats),
        tuple(user_ids),
        tuple(item_ids),
    )
