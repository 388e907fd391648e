"""Acceptance criteria, one test each, with a PASS/FAIL line per criterion.

Criterion 7 runs resumable mini sweeps under ``runs/acceptance``; a rerun
with unchanged code reuses the stored records.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from privrec import dataset, dpsgd, experiment, models, verify

ROOT = Path(__file__).resolve().parents[1]
ML1M = ROOT / "data" / "ml-1m"
ML100K = ROOT / "data" / "ml-100k"


def verdict(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def test_criterion_1_movielens_preprocessing():
    ratings, movies = ML1M / "ratings.dat", ML1M / "movies.dat"
    if not (ratings.is_file() and movies.is_file()):
        verdict(1, "MovieLens-1M preprocessing", False,
                f"raw files not present under {ML1M}; counts 6,038 / 3,258 / 835,614 cannot be checked")
    t0 = time.perf_counter()
    parsed = dataset.parse_movielens(ratings, movies)
    store = dataset.preprocess(parsed.ratings, parsed.categories)
    seconds = time.perf_counter() - t0
    s = store.stats()
    got = (s["users"], s["items"], s["interactions"])
    verdict(1, "MovieLens-1M preprocessing", got == (6038, 3258, 835614) and seconds < 120,
            f"users/items/interactions {got} in {seconds:.1f}s")


def test_criterion_2_ldp_rates():
    worst = 0.0
    for eps in (0.5, 1.0, 2.0):
        _, _, _, _, z_keep, z_add = verify.ldp_rate_check(eps, 100_000, seed=int(eps * 1000) + 1)
        worst = max(worst, abs(z_keep), abs(z_add))
    verdict(2, "LDP retention/addition rates", worst <= 4.0, f"largest deviation {worst:.2f} binomial sd (limit 4)")


def test_criterion_3_gradient_exactness():
    t0 = time.perf_counter()
    failures = {kind: verify.gradient_check(kind, draws=100, seed=99) for kind in models.MODEL_KINDS}
    seconds = time.perf_counter() - t0
    bad = {k: len(v) for k, v in failures.items() if v}
    verdict(3, "finite-difference gradients", not bad and seconds < 300,
            f"4 models x 100 draws, failures {bad or 0}, {seconds:.1f}s")


def test_criterion_4_accountant():
    rng = np.random.default_rng(404)
    q1_err = 0.0
    for _ in range(200):
        sigma, alpha = rng.uniform(0.3, 10), rng.uniform(1.01, 256)
        q1_err = max(q1_err, abs(dpsgd.rdp_subsampled_gaussian(1.0, sigma, alpha) - alpha / (2 * sigma**2)))
    violations = 0
    for _ in range(100):
        q, sigma, steps = rng.uniform(1e-4, 0.5), rng.uniform(0.3, 5), int(rng.integers(1, 10_000))
        base = dpsgd.PrivacyLedger(q, sigma, steps=steps).epsilon()
        more_steps = dpsgd.PrivacyLedger(q, sigma, steps=steps + int(rng.integers(1, 5000))).epsilon()
        more_noise = dpsgd.PrivacyLedger(q, sigma * rng.uniform(1.01, 3), steps=steps).epsilon()
        violations += (more_steps < base) + (more_noise > base)
    sigma = dpsgd.noise_multiplier_for(1.0, 1e-5)
    ok = q1_err <= 1e-9 and violations == 0 and abs(sigma - 4.84) <= 0.005 * 4.84
    verdict(4, "RDP accountant", ok,
            f"q=1 max error {q1_err:.2e}, monotonicity violations {violations}/200, sigma(1, 1e-5) = {sigma:.4f}")


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(505)
    worst, count = 0.0, 0
    for _ in range(10):
        for _, got, want in verify.compare_metrics(verify.random_metric_instance(rng)):
            worst = max(worst, abs(got - want))
            count += 1
    verdict(5, "metric oracles", worst <= 1e-12, f"{count} comparisons on 10 instances, max difference {worst:.1e}")


def test_criterion_6_noiseless_equivalence():
    mismatched = [k for k in models.MODEL_KINDS
                  if verify.noiseless_losses(k, dp=False, epochs=3) != verify.noiseless_losses(k, dp=True, epochs=3)]
    verdict(6, "noiseless DPSGD equals SGD", not mismatched,
            f"bitwise epoch losses equal for {len(models.MODEL_KINDS) - len(mismatched)}/4 models")


# ---------------------------------------------------------------- trend check


def mini_config(name: str) -> experiment.ExperimentConfig:
    cfg = experiment.ExperimentConfig.load(ROOT / "configs" / f"mini_{name}.json")
    source = ML1M if (ML1M / "ratings.dat").is_file() else ML100K
    cfg.dataset.ratings_path = str(source / "ratings.dat")
    cfg.dataset.movies_path = str(source / "movies.dat")
    cfg.output_dir = str(ROOT / "runs" / "acceptance" / f"mini_{name}")
    cfg.validate()
    return cfg


def ndcg_trend(rows: list[dict]) -> tuple[bool, str]:
    """Non-increasing NDCG as realized epsilon falls, one inversion within one pooled std allowed."""
    ordered = sorted(rows, key=lambda r: -math.inf if r["regime"] == "none" else -r["realized_epsilon"])
    means = [r["ndcg.mean"] for r in ordered]
    stds = [r["ndcg.std"] or 0.0 for r in ordered]
    inversions, tolerated = 0, True
    for i in range(len(means) - 1):
        if means[i + 1] > means[i]:
            inversions += 1
            pooled = math.sqrt((stds[i] ** 2 + stds[i + 1] ** 2) / 2)
            tolerated &= means[i + 1] - means[i] <= pooled
    ok = inversions == 0 or (inversions == 1 and tolerated)
    return ok, " > ".join(f"{m:.4f}" for m in means) + f" ({inversions} inversion(s))"


@pytest.mark.slow
def test_criterion_7_trend_check():
    details, ok, wall = [], True, 0.0
    for name in ("ncf", "bpr"):
        cfg = mini_config(name)
        result = experiment.sweep(cfg)
        wall += sum(r.wall_time for r in result.records)
        rows = result.aggregates
        failed = sum(r["failed"] for r in rows)
        baseline = next(r for r in rows if r["regime"] == "none")
        strongest = max((r for r in rows if r["regime"] == "dpsgd"), key=lambda r: r["budget"])
        trend_ok, trend = ndcg_trend(rows)
        pl_base, pl_strong = baseline["popularity_lift.mean"], strongest["popularity_lift.mean"]
        model_ok = failed == 0 and trend_ok and pl_base > 0 and pl_strong < pl_base
        ok &= model_ok
        details.append(f"{name.upper()} users={experiment.prepare(cfg).store.num_users} NDCG {trend}; "
                       f"PL non-private {pl_base:+.3f}, sigma={strongest['budget']:g} {pl_strong:+.3f}; failed runs {failed}")
    ok &= wall <= 7200
    verdict(7, "mini-profile trends", ok, " | ".join(details) + f" | compute {wall / 60:.1f} min")


@pytest.mark.slow
def test_criterion_8_full_scale_spot_check():
    if not os.environ.get("PRIVREC_FULL_SCALE") or not (ML1M / "ratings.dat").is_file():
        line = "criterion 8 SKIP  full-scale NCF (optional): needs PRIVREC_FULL_SCALE=1 and MovieLens-1M files"
        ACCEPTANCE_LINES.append(line)
        pytest.skip(line)
    cfg = experiment.ExperimentConfig.load(ROOT / "configs" / "ml1m_ncf_dpsgd.json")
    cfg.dataset.ratings_path, cfg.dataset.movies_path = str(ML1M / "ratings.dat"), str(ML1M / "movies.dat")
    cfg.output_dir = str(ROOT / "runs" / "acceptance" / "full_ncf")
    rec = experiment.run_one(cfg, "none", None, cfg.seeds[0])
    ndcg = (rec.metrics or {}).get("ndcg")
    verdict(8, "full-scale non-private NCF", rec.status == "ok" and ndcg is not None and ndcg >= 0.55,
            f"NDCG@10 {ndcg} (target >= 0.55)")
