"""Variational autoencoder with a multinomial likelihood over items."""
from __future__ import annotations

import numpy as np

from ..dataset import UserItemSets
from .base import VAE, Batch, PerExampleGrads, Recommender


def _log_softmax(x):
    m = x.max(axis=1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=1, keepdims=True))


def _normalize(rows):
    norm = np.linalg.norm(rows, axis=1, keepdims=True)
    return np.divide(rows, norm, out=np.zeros_like(rows), where=norm > 0)


class VAEModel(Recommender):
    """One tanh hidden layer on each side of a Gaussian latent.

    The loss per user is the negative ELBO: multinomial reconstruction NLL plus
    ``beta`` times KL(q(z|x) || N(0, I)). Inputs are l2-normalised rows.
    """

    kind = VAE

    def _check_dims(self, dims):
        out = {
            "hidden": int(dims.get("hidden", 100)),
            "latent": int(dims.get("latent", 50)),
            "beta": float(dims.get("beta", 1.0)),
        }
        if out["hidden"] < 1 or out["latent"] < 1 or out["beta"] < 0:
            raise ValueError(f"invalid VAE dims {out}")
        return out

    def _param_shapes(self):
        n, h, z = self.num_items, self.dims["hidden"], self.dims["latent"]
        return {
            "enc_w": (n, h), "enc_b": (h,),
            "mu_w": (h, z), "mu_b": (z,),
            "logvar_w": (h, z), "logvar_b": (z,),
            "dec_w": (z, h), "dec_b": (h,),
            "out_w": (h, n), "out_b": (n,),
        }

    def _init_params(self, rng):
        for w, b in (("enc_w", "enc_b"), ("mu_w", "mu_b"), ("logvar_w", "logvar_b"), ("dec_w", "dec_b"), ("out_w", "out_b")):
            self._linear_init(rng, w, b)

    def _encode(self, rows):
        P = self.params
        x = _normalize(rows)
        h1 = np.tanh(x @ P["enc_w"] + P["enc_b"])
        return x, h1, h1 @ P["mu_w"] + P["mu_b"], h1 @ P["logvar_w"] + P["logvar_b"]

    def _decode(self, z):
        h2 = np.tanh(z @ self.params["dec_w"] + self.params["dec_b"])
        return h2, h2 @ self.params["out_w"] + self.params["out_b"]

    def elbo_terms(self, rows, targets=None, eps=None):
        """Per-user (reconstruction NLL, KL); ``eps=None`` decodes the encoder mean."""
        targets = rows if targets is None else targets
        _, _, mu, logvar = self._encode(rows)
        z = mu if eps is None else mu + np.exp(0.5 * logvar) * eps
        _, logits = self._decode(z)
        nll = -(targets * _log_softmax(logits)).sum(axis=1)
        kl = -0.5 * (1.0 + logvar - mu**2 - np.exp(logvar)).sum(axis=1)
        return nll, kl

    def forward_backward(self, batch: Batch, rng=None, backward=True, train=True):
        P = self.params
        beta = self.dims["beta"]
        rows = batch.rows
        targets = rows if batch.targets is None else batch.targets
        x, h1, mu, logvar = self._encode(rows)
        std = np.exp(0.5 * logvar)
        eps = rng.standard_normal(mu.shape) if (train and rng is not None) else np.zeros_like(mu)
        z = mu + std * eps
        h2, logits = self._decode(z)
        logp = _log_softmax(logits)
        nll = -(targets * logp).sum(axis=1)
        kl = -0.5 * (1.0 + logvar - mu**2 - np.exp(logvar)).sum(axis=1)
        losses = nll + beta * kl
        if not backward:
            return losses, None

        dlogits = np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets
        grads = PerExampleGrads(len(batch))
        grads.dense.append(("out_w", h2, dlogits))
        grads.bias.append(("out_b", dlogits))
        dpre2 = (dlogits @ P["out_w"].T) * (1.0 - h2**2)
        grads.dense.append(("dec_w", z, dpre2))
        grads.bias.append(("dec_b", dpre2))
        dz = dpre2 @ P["dec_w"].T
        dmu = dz + beta * mu
        dlogvar = dz * eps * 0.5 * std + beta * 0.5 * (np.exp(logvar) - 1.0)
        grads.dense += [("mu_w", h1, dmu), ("logvar_w", h1, dlogvar)]
        grads.bias += [("mu_b", dmu), ("logvar_b", dlogvar)]
        dpre1 = (dmu @ P["mu_w"].T + dlogvar @ P["logvar_w"].T) * (1.0 - h1**2)
        grads.dense.append(("enc_w", x, dpre1))
        grads.bias.append(("enc_b", dpre1))
        return losses, grads

    def score_users(self, users, history: UserItemSets | None = None):
        if history is None:
            raise ValueError("VAE scoring needs the users' interaction history")
        _, _, mu, _ = self._encode(history.dense(users))
        return self._decode(mu)[1]

    def item_distribution(self, users, history: UserItemSets) -> np.ndarray:
        return np.exp(_log_softmax(self.score_users(users, history)))

    def saturated(self, batch: Batch) -> bool:
        _, h1, mu, logvar = self._encode(batch.rows)
        h2, _ = self._decode(mu)
        return bool(np.any(np.abs(h1) > 0.995) or np.any(np.abs(h2) > 0.995) or np.any(np.abs(logvar) > 10))
