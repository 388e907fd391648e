"""Epoch loop shared by all models, with plain SGD or DPSGD steps."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import dpsgd
from .dataset import UserItemSets
from .metrics import ndcg_at_k
from .models import BPR, VAE, Batch, Recommender, recommend_all

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.05
    weight_decay: float = 1e-5
    batch_size: int = 256
    max_epochs: int = 400
    patience: int = 6
    schedule: str = "plateau"  # "plateau" (x lr_factor after lr_patience flat held-out-loss epochs) or "step"
    lr_factor: float = 0.1
    lr_patience: int = 4
    step_size: int = 4
    step_gamma: float = 0.9
    neg_ratio: int = 4
    embedding_lr_scale: float = 1.0  # step-size multiplier for embedding tables


@dataclass
class DPConfig:
    noise_multiplier: float
    clip_norm: float
    delta: float = dpsgd.DEFAULT_DELTA


@dataclass
class TrainResult:
    epochs: int
    best_epoch: int
    log: list[dict] = field(default_factory=list)
    ledger: dpsgd.PrivacyLedger | None = None
    n_examples: int = 0
    wall_time: float = 0.0


def _pair_keys(users: np.ndarray, items: np.ndarray, n_items: int) -> np.ndarray:
    return users.astype(np.int64) * n_items + items


def sample_negatives(users: np.ndarray, positives: UserItemSets, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn non-positive item per entry of ``users``."""
    n_items = positives.num_items
    pos_keys = _pair_keys(positives.user_of_entry(), positives.indices, n_items)  # sorted
    out = rng.integers(0, n_items, size=len(users))
    todo = np.arange(len(users))
    for _ in range(1000):
        bad = np.isin(_pair_keys(users[todo], out[todo], n_items), pos_keys, assume_unique=False)
        todo = todo[bad]
        if todo.size == 0:
            return out
        out[todo] = rng.integers(0, n_items, size=todo.size)
    raise RuntimeError("negative sampling did not converge; some users rate almost every item")


def _samplable_users(train: UserItemSets) -> np.ndarray:
    counts = train.counts()
    return (counts > 0) & (counts < train.num_items)


def epoch_examples(kind: str, train: UserItemSets, neg_ratio: int, rng: np.random.Generator) -> Batch:
    """Fresh training examples for one epoch (negatives resampled every epoch)."""
    if kind == VAE:
        users = np.flatnonzero(train.counts() > 0)
        return Batch(users, rows=None)
    ok = _samplable_users(train)
    users = train.user_of_entry()
    items = train.indices
    keep = ok[users]
    users, items = users[keep], items[keep]
    if kind == BPR:
        return Batch(users, items=items, negatives=sample_negatives(users, train, rng))
    neg_users = np.repeat(users, neg_ratio)
    neg_items = sample_negatives(neg_users, train, rng)
    return Batch(
        np.concatenate([users, neg_users]),
        items=np.concatenate([items, neg_items]),
        labels=np.concatenate([np.ones(len(users)), np.zeros(len(neg_users))]),
    )


def heldout_batch(kind: str, train: UserItemSets, valid: UserItemSets, neg_ratio: int, rng: np.random.Generator) -> Batch | None:
    """Fixed held-out examples used by the plateau learning-rate schedule."""
    if valid.nnz == 0:
        return None
    if kind == VAE:
        users = np.flatnonzero((valid.counts() > 0) & (train.counts() > 0))
        return Batch(users, rows=train.dense(users), targets=valid.dense(users))
    users, items = valid.user_of_entry(), valid.indices
    seen = UserItemSets.from_lists([np.concatenate([train.items(u), valid.items(u)]) for u in range(train.num_users)], train.num_items)
    ok = _samplable_users(seen)[users]
    users, items = users[ok], items[ok]
    if kind == BPR:
        return Batch(users, items=items, negatives=sample_negatives(users, seen, rng))
    neg_users = np.repeat(users, neg_ratio)
    return Batch(
        np.concatenate([users, neg_users]),
        items=np.concatenate([items, sample_negatives(neg_users, seen, rng)]),
        labels=np.concatenate([np.ones(len(users)), np.zeros(len(neg_users))]),
    )


def validation_ndcg(model: Recommender, history: UserItemSets, exclude: UserItemSets, valid: UserItemSets, k: int) -> float:
    users = np.flatnonzero(valid.counts() > 0)
    if users.size == 0:
        return 0.0
    lists = recommend_all(model, k, exclude, history, users=users)["all"]
    return float(np.mean([ndcg_at_k(r, valid.items(u), k) for u, r in zip(users, lists)]))


def _check_finite(losses: np.ndarray, model: Recommender, epoch: int, step: int) -> None:
    if not np.all(np.isfinite(losses)):
        norms = {name: float(np.linalg.norm(v)) for name, v in model.params.items()}
        raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}; parameter norms {norms}")


def train(
    model: Recommender,
    train_sets: UserItemSets,
    valid: UserItemSets,
    cfg: TrainConfig,
    seed: int = 0,
    dp: DPConfig | None = None,
    exclude: UserItemSets | None = None,
    k: int = 10,
) -> TrainResult:
    """Train ``model`` in place and restore the parameters of the best validation epoch.

    ``train_sets`` is what the model learns from (possibly perturbed);
    ``exclude`` are the items hidden from validation rankings, defaulting to
    ``train_sets``. Validation NDCG is computed at cutoff ``k``.
    """
    exclude = train_sets if exclude is None else exclude
    kind = model.kind
    sample_ss, fwd_ss, noise_ss, heldout_ss = np.random.SeedSequence(seed).spawn(4)
    sample_rng = np.random.default_rng(sample_ss)
    fwd_rng = np.random.default_rng(fwd_ss)
    noise_rng = np.random.default_rng(noise_ss)
    heldout = heldout_batch(kind, train_sets, valid, cfg.neg_ratio, np.random.default_rng(heldout_ss))

    probe = epoch_examples(kind, train_sets, cfg.neg_ratio, np.random.default_rng(0))
    n_examples = len(probe)
    if n_examples == 0:
        raise ValueError("no training examples")
    batch_size = min(cfg.batch_size, n_examples)
    steps_per_epoch = n_examples // batch_size

    ledger = None
    spec = None
    if dp is not None:
        spec = dpsgd.ClipNoiseSpec.for_dataset(dp.clip_norm, dp.noise_multiplier, batch_size, n_examples)
        ledger = dpsgd.PrivacyLedger(spec.sample_rate, dp.noise_multiplier)

    vae_rows = train_sets.dense() if kind == VAE else None
    step_scale = None
    if cfg.embedding_lr_scale != 1.0:
        step_scale = np.ones(model.num_params)
        for name in model.embedding_tables:
            lo, hi = model.offsets[name]
            step_scale[lo:hi] = cfg.embedding_lr_scale
    lr = cfg.lr
    result = TrainResult(epochs=0, best_epoch=0, ledger=ledger, n_examples=n_examples)
    best_ndcg, best_theta, stale = -math.inf, model.flat(), 0
    best_loss, loss_stale = math.inf, 0
    t0 = time.perf_counter()
    ones = np.ones(batch_size)

    for epoch in range(1, cfg.max_epochs + 1):
        examples = epoch_examples(kind, train_sets, cfg.neg_ratio, sample_rng)
        if vae_rows is not None:
            examples.rows = vae_rows[examples.users]
        perm = sample_rng.permutation(len(examples))
        total = 0.0
        for step in range(steps_per_epoch):
            batch = examples.take(perm[step * batch_size : (step + 1) * batch_size])
            losses, grads = model.forward_backward(batch, fwd_rng)
            _check_finite(losses, model, epoch, step)
            total += losses.sum()
            if spec is None:
                g = grads.weighted_sum(model, ones)
            else:
                norms = np.sqrt(grads.sq_norms())
                factors = dpsgd.clip_factors(norms, spec.clip_norm)
                assert np.all(norms * factors <= spec.clip_norm * (1 + 1e-9)), "clipped norm above C"
                g = grads.weighted_sum(model, factors)
                noise = dpsgd.gaussian_noise(g.size, spec, noise_rng)
                if noise is not None:
                    g += noise
                ledger.step()
            g /= batch_size
            dpsgd.sgd_update_(model.theta, g, lr if step_scale is None else lr * step_scale, cfg.weight_decay)

        val_ndcg = validation_ndcg(model, train_sets, exclude, valid, k)
        val_loss = float(np.mean(model.forward_backward(heldout, None, backward=False, train=False)[0])) if heldout else math.nan
        entry = {
            "epoch": epoch,
            "loss": total / max(steps_per_epoch * batch_size, 1),
            "val_loss": val_loss,
            "val_ndcg": val_ndcg,
            "lr": lr,
            "epsilon": ledger.epsilon(dp.delta) if ledger is not None else math.inf,
        }
        result.log.append(entry)
        result.epochs = epoch
        log.debug("epoch %d loss %.5f val_ndcg %.4f lr %.3g", epoch, entry["loss"], val_ndcg, lr)

        if val_ndcg > best_ndcg:
            best_ndcg, best_theta, stale = val_ndcg, model.flat(), 0
            result.best_epoch = epoch
        else:
            stale += 1
        if stale >= cfg.patience:
            break

        if cfg.schedule == "plateau":
            if val_loss < best_loss:
                best_loss, loss_stale = val_loss, 0
            else:
                loss_stale += 1
                if loss_stale >= cfg.lr_patience:
                    lr *= cfg.lr_factor
                    loss_stale = 0
        elif cfg.schedule == "step":
            if epoch % cfg.step_size == 0:
                lr *= cfg.step_gamma
        else:
            raise ValueError(f"unknown schedule {cfg.schedule!r}")

    model.load_flat(best_theta)
    result.wall_time = time.perf_counter() - t0
    return result
