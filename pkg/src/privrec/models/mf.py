"""Embedding-only models: SVD-style factorization (squared error) and BPR."""
from __future__ import annotations

import numpy as np

from .base import BPR, SVD, Batch, PerExampleGrads, Recommender


class _Factorization(Recommender):
    def _check_dims(self, dims):
        dim = int(dims.get("dim", 5))
        if dim < 1:
            raise ValueError(f"latent dim must be >= 1, got {dim}")
        return {"dim": dim}

    def _param_shapes(self):
        d = self.dims["dim"]
        return {"user": (self.num_users, d), "item": (self.num_items, d)}

    def _init_params(self, rng):
        self._embedding_init(rng, "user", "item")

    def score_users(self, users, history=None):
        return self.params["user"][users] @ self.params["item"].T


class SVDModel(_Factorization):
    """Dot-product factorization fit by squared error on 0/1 labels."""

    kind = SVD
    embedding_tables = ("user", "item")

    def forward_backward(self, batch: Batch, rng=None, backward=True, train=True):
        p = self.params["user"][batch.users]
        q = self.params["item"][batch.items]
        err = np.einsum("bd,bd->b", p, q) - batch.labels
        losses = err**2
        if not backward:
            return losses, None
        g = 2.0 * err[:, None]
        grads = PerExampleGrads(len(batch), rows=[("user", batch.users, g * q), ("item", batch.items, g * p)])
        return losses, grads


class BPRModel(_Factorization):
    """Pairwise ranking: -log sigmoid(s(u, i) - s(u, j))."""

    kind = BPR
    embedding_tables = ("user", "item")

    def forward_backward(self, batch: Batch, rng=None, backward=True, train=True):
        if np.any(batch.items == batch.negatives):
            raise ValueError("BPR triples need distinct positive and negative items")
        p = self.params["user"][batch.users]
        qi = self.params["item"][batch.items]
        qj = self.params["item"][batch.negatives]
        x = np.einsum("bd,bd->b", p, qi - qj)
        losses = np.logaddexp(0.0, -x)
        if not backward:
            return losses, None
        g = -np.exp(-np.logaddexp(0.0, x))[:, None]  # d loss / dx = -sigmoid(-x)
        grads = PerExampleGrads(
            len(batch),
            rows=[
                ("user", batch.users, g * (qi - qj)),
                ("item", batch.items, g * p),
                ("item", batch.negatives, -g * p),
            ],
        )
        return losses, grads
