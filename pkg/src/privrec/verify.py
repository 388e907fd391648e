"""Built-in self-checks on synthetic fixtures, runnable from the command line."""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field
from typing import Callable
from unittest import mock

import numpy as np

from . import dpsgd, ldp, metrics, models, oracles
from .dataset import UserItemSets
from .models import Batch, Recommender

MUTATIONS = ("broken_clip",)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    seconds: float
    checks: int = 0
    failures: list[str] = field(default_factory=list)


class _Checker:
    def __init__(self):
        self.checks = 0
        self.failures: list[str] = []

    def expect(self, ok: bool, message: str) -> None:
        self.checks += 1
        if not ok:
            self.failures.append(message)


# ---------------------------------------------------------------- gradients


def random_example(kind: str, num_users: int, num_items: int, rng: np.random.Generator) -> Batch:
    user = rng.integers(num_users, size=1)
    if kind == models.VAE:
        row = (rng.random((1, num_items)) < 0.4).astype(float)
        row[0, rng.integers(num_items)] = 1.0
        return Batch(user, rows=row)
    items = rng.choice(num_items, size=2, replace=False)
    if kind == models.BPR:
        return Batch(user, items=items[:1], negatives=items[1:])
    return Batch(user, items=items[:1], labels=rng.integers(0, 2, size=1).astype(float))


def small_model(kind: str, seed: int, num_users: int = 7, num_items: int = 9, scale: float = 0.5) -> Recommender:
    dims = {models.VAE: {"hidden": 6, "latent": 3}, models.NCF: {"gmf_dim": 3, "mlp_layers": (6, 4, 3)}}.get(kind, {"dim": 4})
    model = models.init(kind, num_users, num_items, seed=seed, **dims)
    model.theta[:] = np.random.default_rng(seed + 1).normal(0.0, scale, model.num_params)
    return model


def finite_difference_error(model: Recommender, example: Batch, fwd_seed: int, rng: np.random.Generator,
                            n_coords: int = 40, h: float = 1e-6) -> float:
    """Relative error between the analytic and the central-difference gradient.

    Stochastic forward passes (dropout, reparameterisation) reuse one seed so
    every evaluation sees the same noise.
    """
    def f() -> float:
        return model.loss(example, np.random.default_rng(fwd_seed))

    _, grad = model.loss_and_grad(example, np.random.default_rng(fwd_seed))
    nonzero = np.flatnonzero(grad)
    coords = np.union1d(
        rng.choice(nonzero, size=min(n_coords, nonzero.size), replace=False),
        rng.choice(model.num_params, size=min(10, model.num_params), replace=False),
    )
    fd = np.empty(coords.size)
    for n, c in enumerate(coords):
        old = model.theta[c]
        model.theta[c] = old + h
        up = f()
        model.theta[c] = old - h
        down = f()
        model.theta[c] = old
        fd[n] = (up - down) / (2 * h)
    an = grad[coords]
    scale = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
    return float(np.linalg.norm(fd - an) / scale)


def gradient_check(kind: str, draws: int, seed: int = 0) -> list[str]:
    """Failures over ``draws`` random (model, example) pairs for one model kind."""
    failures = []
    rng = np.random.default_rng([seed, models.MODEL_KINDS.index(kind)])
    for d in range(draws):
        model = small_model(kind, seed=int(rng.integers(2**31)))
        example = random_example(kind, model.num_users, model.num_items, rng)
        saturated = getattr(model, "saturated", lambda b: False)(example)
        tol = 1e-3 if saturated else 1e-4
        err = finite_difference_error(model, example, fwd_seed=d, rng=rng)
        if not err <= tol:
            failures.append(f"{kind} draw {d}: gradient relative error {err:.3g} > {tol:g}")
    return failures


def clipping_check(seed: int = 0) -> list[str]:
    """Clipped per-example gradients never exceed C and match the dense clip."""
    failures = []
    rng = np.random.default_rng(seed)
    for kind in models.MODEL_KINDS:
        model = small_model(kind, seed=seed, scale=2.0)
        examples = [random_example(kind, model.num_users, model.num_items, rng) for _ in range(8)]
        for C in (1e-3, 0.1, 1.0):
            for ex in examples:
                _, grads = model.forward_backward(ex, np.random.default_rng(0))
                norm = np.sqrt(grads.sq_norms())
                factor = dpsgd.clip_factors(norm, C)
                clipped = grads.weighted_sum(model, factor)
                dense = dpsgd.clip(grads.weighted_sum(model, np.ones(1)), C)
                if np.linalg.norm(clipped) > C * (1 + 1e-9):
                    failures.append(f"{kind}: clipped norm {np.linalg.norm(clipped):.4g} exceeds C={C}")
                if np.linalg.norm(dense) > C * (1 + 1e-9):
                    failures.append(f"{kind}: dense clip norm {np.linalg.norm(dense):.4g} exceeds C={C}")
                if not np.allclose(clipped, dense, rtol=1e-9, atol=1e-15):
                    failures.append(f"{kind}: factored clip differs from dense clip at C={C}")
    return failures


def suite_gradients(draws: int = 30) -> _Checker:
    ck = _Checker()
    for kind in models.MODEL_KINDS:
        fails = gradient_check(kind, draws)
        ck.expect(not fails, "; ".join(fails[:3]))
    fails = clipping_check()
    ck.expect(not fails, "clipping invariant: " + "; ".join(fails[:3]))
    return ck


# ---------------------------------------------------------------- metrics


def random_metric_instance(rng: np.random.Generator, max_users: int = 10, max_items: int = 10, k: int = 5):
    n_users = int(rng.integers(1, max_users + 1))
    n_items = int(rng.integers(2, max_items + 1))
    labels = ["a", "b", "c", "d"]
    categories = [tuple(rng.choice(labels, size=int(rng.integers(1, 4)), replace=False)) for _ in range(n_items)]
    popularity = rng.uniform(0.05, 1.0, n_items)
    histories = [list(rng.choice(n_items, size=int(rng.integers(1, n_items + 1)), replace=False)) for _ in range(n_users)]
    recs = [list(rng.choice(n_items, size=int(rng.integers(1, min(k, n_items) + 1)), replace=False)) for _ in range(n_users)]
    relevant = [list(rng.choice(n_items, size=int(rng.integers(0, n_items + 1)), replace=False)) for _ in range(n_users)]
    head = sorted(rng.choice(n_items, size=max(1, n_items // 5), replace=False).tolist())
    tail = [i for i in range(n_items) if i not in head]
    return dict(categories=categories, popularity=popularity, histories=histories, recs=recs,
                relevant=relevant, head=head, tail=tail, k=k)


def compare_metrics(inst: dict) -> list[tuple[str, float, float]]:
    """(name, implementation, oracle) for every metric on one instance."""
    out = []
    cats, pop, k = inst["categories"], inst["popularity"], inst["k"]
    index = metrics.CategoryIndex(cats)
    pop_list = pop.tolist()
    for u, (hist, rec, rel) in enumerate(zip(inst["histories"], inst["recs"], inst["relevant"])):
        out.append((f"ndcg[{u}]", metrics.ndcg_at_k(rec, rel, k), oracles.ndcg(rec, rel, k)))
        out.append((f"kld[{u}]", metrics.kld_miscalibration(hist, rec, index), oracles.kld(hist, rec, cats)))
        out.append((f"kld_rank[{u}]", metrics.kld_miscalibration(hist, rec, index, rank_weighted=True),
                    oracles.kld(hist, rec, cats, rank_weighted=True)))
        out.append((f"novelty[{u}]", metrics.novelty(rec, pop), oracles.novelty(rec, pop_list)))
    out.append(("popularity_lift", metrics.popularity_lift(inst["histories"], inst["recs"], pop),
                oracles.popularity_lift(inst["histories"], inst["recs"], pop_list)))
    all_items = list(range(len(pop)))
    out.append(("coverage", metrics.coverage(all_items, inst["recs"]), oracles.coverage(all_items, inst["recs"])))
    if inst["tail"]:
        out.append(("dpf", metrics.dpf(inst["head"], inst["tail"], inst["recs"]),
                    oracles.dpf(inst["head"], inst["tail"], inst["recs"])))
    return out


def suite_metrics(instances: int = 10, tol: float = 1e-12) -> _Checker:
    ck = _Checker()
    rng = np.random.default_rng(12345)
    for n in range(instances):
        for name, got, want in compare_metrics(random_metric_instance(rng)):
            ck.expect(abs(got - want) <= tol, f"instance {n} {name}: {got!r} != oracle {want!r}")
    return ck


# ---------------------------------------------------------------- accountant


def suite_accountant(points: int = 100) -> _Checker:
    ck = _Checker()
    rng = np.random.default_rng(7)
    for _ in range(20):
        sigma, alpha = rng.uniform(0.3, 10), rng.uniform(1.1, 100)
        got = dpsgd.rdp_subsampled_gaussian(1.0, sigma, alpha)
        ck.expect(abs(got - oracles.rdp_q1(sigma, alpha)) <= 1e-9, f"q=1 RDP {got} != alpha/(2 sigma^2)")
    cases = [(0.01, 1.0, 2), (0.01, 1.0, 8), (0.2, 2.0, 3), (0.05, 0.5, 4), (0.05, 1.5, 2.5), (0.2, 2.0, 3.25), (0.4, 1.0, 1.25)]
    for q, sigma, alpha in cases:
        got, want = dpsgd.rdp_subsampled_gaussian(q, sigma, alpha), oracles.rdp_integral(q, sigma, alpha)
        ck.expect(abs(got - want) <= 1e-8 * abs(want), f"RDP({q},{sigma},{alpha}) {got} != quadrature {want}")
    for _ in range(points):
        q = float(rng.uniform(1e-4, 0.5))
        sigma = float(rng.uniform(0.3, 5))
        steps = int(rng.integers(1, 5000))
        led = dpsgd.PrivacyLedger(q, sigma, steps=steps)
        more = dpsgd.PrivacyLedger(q, sigma, steps=steps + int(rng.integers(1, 1000)))
        noisier = dpsgd.PrivacyLedger(q, sigma * float(rng.uniform(1.01, 2)), steps=steps)
        e, e_more, e_noisy = led.epsilon(), more.epsilon(), noisier.epsilon()
        ck.expect(e_more >= e, f"epsilon decreased with more steps (q={q:.3g}, sigma={sigma:.3g}, T={steps})")
        ck.expect(e_noisy <= e, f"epsilon increased with more noise (q={q:.3g}, sigma={sigma:.3g}, T={steps})")
        denser = dpsgd.PrivacyLedger(min(1.0, q * float(rng.uniform(1.01, 2))), sigma, steps=steps)
        ck.expect(denser.epsilon() >= e, f"epsilon decreased with a larger sample rate (q={q:.3g}, sigma={sigma:.3g})")
    sigma = dpsgd.noise_multiplier_for(1.0, 1e-5)
    ck.expect(abs(sigma - 4.84) <= 0.005 * 4.84, f"noise_multiplier_for(1, 1e-5) = {sigma}")
    return ck


# ---------------------------------------------------------------- LDP


def ldp_rate_check(epsilon: float, events: int, seed: int) -> tuple[float, float, float, float, float, float]:
    """Empirical (keep, add) frequencies, their targets, and their z-scores."""
    p_pos, p_neg = ldp.flip_probabilities(epsilon)
    rng = np.random.default_rng(seed)
    num_items = 1000
    users = events // num_items
    ones = np.arange(num_items // 2)
    kept = added = 0
    for _ in range(users):
        out = ldp.perturb_user(ones, num_items, p_pos, p_neg, rng)
        kept += int(np.count_nonzero(out < num_items // 2))
        added += int(np.count_nonzero(out >= num_items // 2))
    n = users * (num_items // 2)
    z_keep = (kept - n * p_pos) / math.sqrt(n * p_pos * (1 - p_pos))
    z_add = (added - n * p_neg) / math.sqrt(n * p_neg * (1 - p_neg))
    return kept / n, added / n, p_pos, p_neg, z_keep, z_add


def suite_ldp(events: int = 100_000) -> _Checker:
    ck = _Checker()
    for eps in (0.5, 1.0, 2.0):
        keep, add, p_pos, p_neg, z_keep, z_add = ldp_rate_check(eps, events, seed=int(eps * 100))
        ck.expect(abs(z_keep) <= 4, f"eps={eps}: retention {keep:.5f} vs {p_pos:.5f} ({z_keep:+.2f} sd)")
        ck.expect(abs(z_add) <= 4, f"eps={eps}: addition {add:.5f} vs {p_neg:.5f} ({z_add:+.2f} sd)")
    return ck


# ---------------------------------------------------------------- noiseless DPSGD


def synthetic_interactions(num_users: int, num_items: int, density: float, seed: int) -> UserItemSets:
    rng = np.random.default_rng(seed)
    lists = []
    for _ in range(num_users):
        row = np.flatnonzero(rng.random(num_items) < density)
        if row.size == 0:
            row = rng.choice(num_items, size=1)
        lists.append(row)
    return UserItemSets.from_lists(lists, num_items)


def noiseless_losses(kind: str, dp: bool, epochs: int = 2, seed: int = 3) -> list[float]:
    from .training import DPConfig, TrainConfig, train

    data = synthetic_interactions(30, 25, 0.2, seed)
    valid = synthetic_interactions(30, 25, 0.05, seed + 1)
    dims = {models.VAE: {"hidden": 8, "latent": 4}}.get(kind, {})
    model = models.init(kind, 30, 25, seed=seed, **dims)
    cfg = TrainConfig(lr=0.05, batch_size=16, max_epochs=epochs, patience=epochs + 1)
    res = train(model, data, valid, cfg, seed=seed, dp=DPConfig(0.0, math.inf) if dp else None)
    return [e["loss"] for e in res.log]


def suite_noiseless() -> _Checker:
    ck = _Checker()
    for kind in models.MODEL_KINDS:
        plain, private = noiseless_losses(kind, False), noiseless_losses(kind, True)
        ck.expect(plain == private, f"{kind}: sigma=0, C=inf losses {private} differ from SGD {plain}")
    return ck


# ---------------------------------------------------------------- driver

SUITES: dict[str, Callable[[], _Checker]] = {
    "metric-oracles": suite_metrics,
    "gradient-checks": suite_gradients,
    "accountant": suite_accountant,
    "ldp-rates": suite_ldp,
    "noiseless-equivalence": suite_noiseless,
}


@contextlib.contextmanager
def mutation(name: str | None):
    """Deliberately break one component to show that a suite notices."""
    if name is None:
        yield
        return
    if name == "broken_clip":
        with mock.patch.object(dpsgd, "clip_factors", lambda norms, c: np.ones_like(norms)), \
                mock.patch.object(dpsgd, "clip", lambda g, c: np.array(g, dtype=float)):
            yield
        return
    raise ValueError(f"unknown mutation {name!r}; expected one of {MUTATIONS}")


def run_suites(names: list[str] | None = None, mutate: str | None = None) -> list[SuiteResult]:
    names = list(SUITES) if not names else names
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suites {unknown}; available: {list(SUITES)}")
    results = []
    with mutation(mutate):
        for name in names:
            t0 = time.perf_counter()
            try:
                ck = SUITES[name]()
                res = SuiteResult(name, not ck.failures, 0.0, ck.checks, ck.failures)
            except Exception as exc:  # a crash is a failure of that suite
                res = SuiteResult(name, False, 0.0, 0, [f"{type(exc).__name__}: {exc}"])
            res.seconds = time.perf_counter() - t0
            results.append(res)
    return results
