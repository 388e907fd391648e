"""Shared machinery: flat parameter buffer, per-example gradient blocks, ranking."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..dataset import UserItemSets

SVD, BPR, NCF, VAE = "SVD", "BPR", "NCF", "VAE"
MODEL_KINDS = (SVD, BPR, NCF, VAE)


@dataclass
class Batch:
    """A batch of training examples.

    SVD/NCF use ``users, items, labels``; BPR uses ``users, items, negatives``;
    VAE uses ``users, rows`` (binary interaction rows) and optionally
    ``targets`` when the reconstruction target differs from the input.
    """

    users: np.ndarray
    items: np.ndarray | None = None
    labels: np.ndarray | None = None
    negatives: np.ndarray | None = None
    rows: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.users)

    def take(self, idx: np.ndarray) -> "Batch":
        def pick(a):
            return None if a is None else a[idx]

        return Batch(self.users[idx], pick(self.items), pick(self.labels), pick(self.negatives), pick(self.rows), pick(self.targets))


@dataclass
class PerExampleGrads:
    """Per-example gradients kept in factored form.

    ``rows`` entries are embedding-row gradients ``(param, row index, values)``;
    ``dense`` entries are weight matrices whose per-example gradient is the
    outer product ``inputs[b] x deltas[b]``; ``bias`` entries are per-example
    bias gradients. Within one example, rows hit in the same table must be
    distinct for :meth:`sq_norms` to be exact.
    """

    size: int
    rows: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)
    dense: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)
    bias: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def sq_norms(self) -> np.ndarray:
        out = np.zeros(self.size)
        for _, _, vals in self.rows:
            out += np.einsum("bd,bd->b", vals, vals)
        for _, a, d in self.dense:
            out += np.einsum("bi,bi->b", a, a) * np.einsum("bo,bo->b", d, d)
        for _, d in self.bias:
            out += np.einsum("bo,bo->b", d, d)
        return out

    def weighted_sum(self, model: "Recommender", weights: np.ndarray) -> np.ndarray:
        """Flat gradient sum_b weights[b] * g_b."""
        flat = np.zeros(model.num_params)
        views = model.views(flat)
        for name, idx, vals in self.rows:
            np.add.at(views[name], idx, weights[:, None] * vals)
        for name, a, d in self.dense:
            views[name] += a.T @ (weights[:, None] * d)
        for name, d in self.bias:
            views[name] += weights @ d
        return flat


@dataclass(frozen=True)
class RecommendationList:
    user: int
    items: np.ndarray
    scores: np.ndarray
    short: bool = False  # fewer than k candidates were available


class Recommender:
    """Base class; parameters live in one flat float64 buffer ``theta``."""

    kind: str = ""
    embedding_tables: tuple[str, ...] = ()

    def __init__(self, num_users: int, num_items: int, seed: int = 0, **dims):
        if num_users < 1 or num_items < 1:
            raise ValueError("need at least one user and one item")
        self.num_users, self.num_items = int(num_users), int(num_items)
        self.seed = seed
        self.dims = self._check_dims(dims)
        self.shapes: dict[str, tuple[int, ...]] = self._param_shapes()
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for name, shape in self.shapes.items():
            n = math.prod(shape)
            self.offsets[name] = (pos, pos + n)
            pos += n
        self.num_params = pos
        self.theta = np.zeros(pos)
        self.params = self.views(self.theta)
        self._init_params(np.random.default_rng(seed))

    # -- to be provided by subclasses
    def _check_dims(self, dims: dict) -> dict:
        raise NotImplementedError

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    def _init_params(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def forward_backward(self, batch: Batch, rng: np.random.Generator | None, backward: bool = True, train: bool = True):
        """Per-example losses and (optionally) per-example gradients."""
        raise NotImplementedError

    def score_users(self, users: np.ndarray, history: UserItemSets | None = None) -> np.ndarray:
        """Ranking scores for every item, one row per user."""
        raise NotImplementedError

    # -- flat view
    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {name: flat[lo:hi].reshape(self.shapes[name]) for name, (lo, hi) in self.offsets.items()}

    def flat(self) -> np.ndarray:
        return self.theta.copy()

    def load_flat(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != self.theta.shape:
            raise ValueError(f"expected {self.theta.shape} parameters, got {values.shape}")
        self.theta[:] = values

    def _embedding_init(self, rng: np.random.Generator, *names: str) -> None:
        for name in names:
            self.params[name][:] = rng.normal(0.0, 0.01, self.shapes[name])

    def _linear_init(self, rng: np.random.Generator, weight: str, bias: str) -> None:
        fan_in = self.shapes[weight][0]
        bound = 1.0 / math.sqrt(fan_in)
        self.params[weight][:] = rng.uniform(-bound, bound, self.shapes[weight])
        self.params[bias][:] = rng.uniform(-bound, bound, self.shapes[bias])

    # -- single-example API
    def loss(self, batch: Batch, rng: np.random.Generator | None = None) -> float:
        losses, _ = self.forward_backward(batch, rng, backward=False)
        return float(losses.sum())

    def loss_and_grad(self, example: Batch, rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
        """Loss and exact flat gradient of a single example."""
        if len(example) != 1:
            raise ValueError("loss_and_grad takes a single example")
        losses, grads = self.forward_backward(example, rng)
        if not np.isfinite(losses[0]):
            raise FloatingPointError(f"non-finite loss; parameter norm {np.linalg.norm(self.theta):.4g}")
        return float(losses[0]), grads.weighted_sum(self, np.ones(1))

    def score(self, user: int, items: np.ndarray, history: UserItemSets | None = None) -> np.ndarray:
        self._check_user(user)
        items = np.asarray(items, dtype=np.int64)
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item index out of range")
        return self.score_users(np.array([user]), history)[0, items]

    def _check_user(self, user: int) -> None:
        if not 0 <= user < self.num_users:
            raise IndexError(f"user {user} out of range")

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "num_users": self.num_users,
            "num_items": self.num_items,
            "seed": self.seed,
            "dims": dict(self.dims),
            "params": {name: v.tolist() for name, v in self.params.items()},
        }


def _sorted_topk(scores: np.ndarray, k: int) -> np.ndarray:
    finite = np.flatnonzero(np.isfinite(scores))
    if len(finite) <= k:
        cand = finite
    else:
        kth = np.partition(scores[finite], len(finite) - k)[len(finite) - k]
        cand = finite[scores[finite] >= kth]
    # candidates are in ascending index order, so a stable sort breaks ties by index
    order = np.argsort(-scores[cand], kind="stable")
    return cand[order][:k]


def topk_from_scores(scores: np.ndarray, k: int, exclude: np.ndarray | None = None, user: int = -1) -> RecommendationList:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.array(scores, dtype=float)
    if exclude is not None and len(exclude):
        scores[np.asarray(exclude, dtype=np.int64)] = -np.inf
    items = _sorted_topk(scores, k)
    return RecommendationList(user, items, scores[items], short=len(items) < k)


def recommend_topk(
    model: Recommender,
    user: int,
    k: int,
    exclude: np.ndarray | None = None,
    history: UserItemSets | None = None,
) -> RecommendationList:
    model._check_user(user)
    scores = model.score_users(np.array([user]), history)[0]
    return topk_from_scores(scores, k, exclude, user)


def recommend_all(
    model: Recommender,
    k: int,
    exclude: UserItemSets,
    history: UserItemSets | None = None,
    users: np.ndarray | None = None,
    item_masks: dict[str, np.ndarray] | None = None,
    chunk: int = 256,
) -> dict[str, list[np.ndarray]]:
    """Top-k lists for many users at once.

    Returns ``{"all": lists}`` plus one entry per boolean item mask in
    ``item_masks``, where ranking is restricted to the masked items.
    """
    users = np.arange(model.num_users) if users is None else np.asarray(users)
    masks = {"all": None, **(item_masks or {})}
    out: dict[str, list[np.ndarray]] = {name: [] for name in masks}
    for lo in range(0, len(users), chunk):
        block = users[lo : lo + chunk]
        scores = model.score_users(block, history)
        for row, u in enumerate(block):
            s = scores[row].copy()
            s[exclude.items(u)] = -np.inf
            for name, mask in masks.items():
                if mask is None:
                    out[name].append(_sorted_topk(s, k))
                else:
                    out[name].append(_sorted_topk(np.where(mask, s, -np.inf), k))
    return out
