import math

import numpy as np
import pytest

from privrec import models
from privrec.dataset import UserItemSets
from privrec.training import DPConfig, TrainConfig, TrainingDiverged, heldout_batch, train
from privrec.verify import noiseless_losses, synthetic_interactions


@pytest.mark.parametrize("kind", models.MODEL_KINDS)
def test_noiseless_dpsgd_equals_sgd(kind):
    plain = noiseless_losses(kind, dp=False, epochs=3)
    private = noiseless_losses(kind, dp=True, epochs=3)
    assert plain == private


def _planted_blocks():
    lists = [range(0, 10) if u < 10 else range(10, 20) for u in range(20)]
    return UserItemSets.from_lists([list(r) for r in lists], 20)


def test_planted_block_svd_loss_strictly_decreases():
    data = _planted_blocks()
    # the other block is only reachable as negatives, so every user keeps a nonempty candidate set
    valid = UserItemSets.from_lists([[] for _ in range(20)], 20)
    model = models.init("SVD", 20, 20, seed=0, dim=2)
    cfg = TrainConfig(lr=0.5, batch_size=10_000, max_epochs=10, patience=100, weight_decay=0.0)
    res = train(model, data, valid, cfg, seed=0)
    losses = [e["loss"] for e in res.log]
    assert len(losses) == 10
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_early_stop_after_six_flat_epochs():
    data = synthetic_interactions(15, 12, 0.3, 0)
    valid = synthetic_interactions(15, 12, 0.1, 1)
    model = models.init("SVD", 15, 12, seed=0)
    res = train(model, data, valid, TrainConfig(lr=0.0, max_epochs=50, patience=6, weight_decay=0.0), seed=0)
    assert len({e["val_ndcg"] for e in res.log}) == 1
    assert res.epochs == 7 and res.best_epoch == 1


def test_step_schedule_and_best_restore():
    data = synthetic_interactions(15, 12, 0.3, 0)
    valid = synthetic_interactions(15, 12, 0.1, 1)
    model = models.init("NCF", 15, 12, seed=0)
    cfg = TrainConfig(lr=0.1, max_epochs=9, patience=100, schedule="step", batch_size=32)
    res = train(model, data, valid, cfg, seed=0)
    lrs = [e["lr"] for e in res.log]
    assert lrs[:4] == [0.1] * 4 and lrs[4] == pytest.approx(0.09) and lrs[8] == pytest.approx(0.081)
    best = max(e["val_ndcg"] for e in res.log)
    assert res.log[res.best_epoch - 1]["val_ndcg"] == best


def test_plateau_schedule_reduces_lr():
    data = synthetic_interactions(15, 12, 0.3, 0)
    valid = synthetic_interactions(15, 12, 0.1, 1)
    model = models.init("BPR", 15, 12, seed=0)
    cfg = TrainConfig(lr=0.0, max_epochs=6, patience=100, lr_patience=2, weight_decay=0.0)
    res = train(model, data, valid, cfg, seed=0)
    # constant held-out loss: best at epoch 1, then x0.1 after every two flat epochs
    assert [e["lr"] for e in res.log] == [0.0] * 6
    cfg = TrainConfig(lr=1e-12, max_epochs=6, patience=100, lr_patience=2, weight_decay=0.0)
    res = train(models.init("BPR", 15, 12, seed=0), data, valid, cfg, seed=0)
    assert res.log[-1]["lr"] < 1e-12


def test_unknown_schedule_rejected():
    data = synthetic_interactions(10, 8, 0.3, 0)
    with pytest.raises(ValueError, match="schedule"):
        train(models.init("SVD", 10, 8), data, data, TrainConfig(schedule="cosine", max_epochs=2), seed=0)


def test_dpsgd_ledger_counts_steps():
    data = synthetic_interactions(20, 15, 0.3, 0)
    valid = synthetic_interactions(20, 15, 0.1, 1)
    model = models.init("BPR", 20, 15, seed=0)
    cfg = TrainConfig(lr=0.1, batch_size=16, max_epochs=3, patience=10)
    res = train(model, data, valid, cfg, seed=0, dp=DPConfig(1.0, 0.5))
    steps_per_epoch = res.n_examples // 16
    assert res.ledger.steps == 3 * steps_per_epoch
    assert res.ledger.sample_rate == pytest.approx(16 / res.n_examples)
    eps = [e["epsilon"] for e in res.log]
    assert all(b > a for a, b in zip(eps, eps[1:]))
    assert eps[-1] == pytest.approx(res.ledger.epsilon())


def test_non_private_log_has_infinite_epsilon():
    data = synthetic_interactions(10, 8, 0.3, 0)
    res = train(models.init("SVD", 10, 8), data, data, TrainConfig(max_epochs=1), seed=0)
    assert res.ledger is None and math.isinf(res.log[0]["epsilon"])


def test_training_deterministic_under_seed():
    data = synthetic_interactions(20, 15, 0.3, 0)
    valid = synthetic_interactions(20, 15, 0.1, 1)
    thetas = []
    for _ in range(2):
        model = models.init("NCF", 20, 15, seed=1)
        train(model, data, valid, TrainConfig(lr=0.1, batch_size=16, max_epochs=2), seed=4, dp=DPConfig(0.8, 0.1))
        thetas.append(model.theta.copy())
    assert np.array_equal(*thetas)


def test_divergence_aborts_with_norms():
    data = synthetic_interactions(10, 8, 0.4, 0)
    model = models.init("SVD", 10, 8, seed=0)
    model.theta[:] = 1e200
    with pytest.raises(TrainingDiverged, match="parameter norms"):
        train(model, data, data, TrainConfig(max_epochs=2), seed=0)


def test_embedding_lr_scale_only_touches_embeddings():
    data = synthetic_interactions(10, 8, 0.4, 0)
    base = models.init("NCF", 10, 8, seed=0)
    start = base.theta.copy()
    scaled = models.init("NCF", 10, 8, seed=0)
    cfg = dict(lr=1e-3, batch_size=10_000, max_epochs=1, weight_decay=0.0)
    train(base, data, data, TrainConfig(**cfg), seed=0)
    train(scaled, data, data, TrainConfig(**cfg, embedding_lr_scale=3.0), seed=0)
    for name in base.params:
        lo, hi = base.offsets[name]
        ratio = 3.0 if name in base.embedding_tables else 1.0
        assert np.allclose(scaled.theta[lo:hi] - start[lo:hi], ratio * (base.theta[lo:hi] - start[lo:hi]), rtol=1e-9, atol=1e-15)


def test_heldout_negatives_avoid_train_and_valid():
    data = synthetic_interactions(20, 15, 0.3, 0)
    valid = synthetic_interactions(20, 15, 0.1, 1)
    batch = heldout_batch("NCF", data, valid, 4, np.random.default_rng(0))
    for u, i, y in zip(batch.users, batch.items, batch.labels):
        if y == 0:
            assert i not in set(data.items(u)) | set(valid.items(u))
