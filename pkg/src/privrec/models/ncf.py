"""Neural collaborative filtering: GMF and MLP branches fused by one linear output."""
from __future__ import annotations

import numpy as np

from .base import NCF, Batch, PerExampleGrads, Recommender


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


class NCFModel(Recommender):
    kind = NCF
    embedding_tables = ("gmf_user", "gmf_item", "mlp_user", "mlp_item")

    def _check_dims(self, dims):
        out = {
            "gmf_dim": int(dims.get("gmf_dim", 8)),
            "mlp_layers": tuple(int(h) for h in dims.get("mlp_layers", (16, 8, 4))),
            "dropout": float(dims.get("dropout", 0.5)),
        }
        if out["gmf_dim"] < 1 or len(out["mlp_layers"]) < 2 or min(out["mlp_layers"]) < 1:
            raise ValueError(f"invalid NCF dims {out}")
        if out["mlp_layers"][0] % 2:
            raise ValueError("first MLP layer is the concatenated user/item embedding and must be even")
        if not 0 <= out["dropout"] < 1:
            raise ValueError("dropout must be in [0, 1)")
        return out

    def _param_shapes(self):
        g, layers = self.dims["gmf_dim"], self.dims["mlp_layers"]
        half = layers[0] // 2
        shapes = {
            "gmf_user": (self.num_users, g),
            "gmf_item": (self.num_items, g),
            "mlp_user": (self.num_users, half),
            "mlp_item": (self.num_items, half),
        }
        for n, (fan_in, fan_out) in enumerate(zip(layers[:-1], layers[1:])):
            shapes[f"w{n}"] = (fan_in, fan_out)
            shapes[f"b{n}"] = (fan_out,)
        shapes["w_out"] = (g + layers[-1], 1)
        shapes["b_out"] = (1,)
        return shapes

    @property
    def n_hidden(self) -> int:
        return len(self.dims["mlp_layers"]) - 1

    def _init_params(self, rng):
        self._embedding_init(rng, "gmf_user", "gmf_item", "mlp_user", "mlp_item")
        for n in range(self.n_hidden):
            self._linear_init(rng, f"w{n}", f"b{n}")
        self._linear_init(rng, "w_out", "b_out")

    def _logits(self, users, items, rng=None, train=False):
        P = self.params
        gu, gi = P["gmf_user"][users], P["gmf_item"][items]
        gmf = gu * gi
        h = np.concatenate([P["mlp_user"][users], P["mlp_item"][items]], axis=1)
        keep = 1.0 - self.dims["dropout"]
        cache = []
        for n in range(self.n_hidden):
            z = h @ P[f"w{n}"] + P[f"b{n}"]
            if train and keep < 1.0:
                mask = (rng.random(z.shape) < keep) / keep
            else:
                mask = None
            a = np.maximum(z, 0.0)
            out = a * mask if mask is not None else a
            cache.append((h, z, mask))
            h = out
        fused = np.concatenate([gmf, h], axis=1)
        logit = fused @ P["w_out"][:, 0] + P["b_out"][0]
        return logit, (gu, gi, fused, cache)

    def forward_backward(self, batch: Batch, rng=None, backward=True, train=True):
        logit, (gu, gi, fused, cache) = self._logits(batch.users, batch.items, rng, train)
        y = batch.labels
        losses = np.logaddexp(0.0, logit) - y * logit  # binary cross-entropy on the logit
        if not backward:
            return losses, None
        P = self.params
        g = self.dims["gmf_dim"]
        dlogit = _sigmoid(logit) - y
        grads = PerExampleGrads(len(batch))
        grads.dense.append(("w_out", fused, dlogit[:, None]))
        grads.bias.append(("b_out", dlogit[:, None]))
        dfused = dlogit[:, None] * P["w_out"][:, 0]
        dgmf, dh = dfused[:, :g], dfused[:, g:]
        for n in reversed(range(self.n_hidden)):
            h_in, z, mask = cache[n]
            dz = dh * (z > 0)
            if mask is not None:
                dz = dz * mask
            grads.dense.append((f"w{n}", h_in, dz))
            grads.bias.append((f"b{n}", dz))
            dh = dz @ P[f"w{n}"].T
        half = dh.shape[1] // 2
        grads.rows += [
            ("gmf_user", batch.users, dgmf * gi),
            ("gmf_item", batch.items, dgmf * gu),
            ("mlp_user", batch.users, dh[:, :half]),
            ("mlp_item", batch.items, dh[:, half:]),
        ]
        return losses, grads

    def score_users(self, users, history=None):
        """Logits for every item; :meth:`score` maps them through the sigmoid."""
        users = np.asarray(users)
        items = np.tile(np.arange(self.num_items), len(users))
        logit, _ = self._logits(np.repeat(users, self.num_items), items)
        return logit.reshape(len(users), self.num_items)

    def score(self, user, items, history=None):
        return _sigmoid(super().score(user, items, history))

    def saturated(self, batch: Batch) -> bool:
        """True when the output or any ReLU input sits where finite differences are unreliable."""
        logit, (_, _, _, cache) = self._logits(batch.users, batch.items)
        near_kink = any(np.any(np.abs(z) < 1e-4) for _, z, _ in cache)
        return bool(np.any(np.abs(logit) > 8) or near_kink)
