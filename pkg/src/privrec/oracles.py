"""Slow, literal reference implementations used to cross-check the fast paths.

Everything here is plain Python over lists and dicts on purpose: no shared
code with :mod:`privrec.metrics` or :mod:`privrec.dpsgd`.
"""
from __future__ import annotations

import math
from fractions import Fraction

import mpmath


def ndcg(rec, relevant, k):
    rel = set(relevant)
    if not rel:
        return 0.0
    dcg = 0.0
    for pos, item in enumerate(list(rec)[:k], start=1):
        if item in rel:
            dcg += 1.0 / math.log2(pos + 1)
    ideal = sum(1.0 / math.log2(pos + 1) for pos in range(1, min(k, len(rel)) + 1))
    return dcg / ideal


def category_distribution(items, categories, weights=None):
    dist: dict[str, float] = {}
    weights = [1.0] * len(items) if weights is None else list(weights)
    total = sum(weights)
    for item, w in zip(items, weights):
        cats = set(categories[item])
        for c in cats:
            dist[c] = dist.get(c, 0.0) + w / len(cats)
    return {c: v / total for c, v in dist.items()} if total else dist


def kld(history, rec, categories, alpha=0.01, rank_weighted=False):
    p = category_distribution(history, categories)
    w = [1.0 / math.log2(r + 2) for r in range(len(rec))] if rank_weighted else None
    q = category_distribution(rec, categories, w)
    out = 0.0
    for c, pc in p.items():
        if pc > 0:
            out += pc * math.log(pc / ((1 - alpha) * q.get(c, 0.0) + alpha * pc))
    return out


def group_average_popularity(lists, popularity):
    return sum(sum(popularity[i] for i in lst) / len(lst) for lst in lists) / len(lists)


def popularity_lift(profiles, recs, popularity):
    gp = group_average_popularity(profiles, popularity)
    return (group_average_popularity(recs, popularity) - gp) / gp


def novelty(rec, popularity):
    return sum(-math.log(popularity[i]) for i in rec) / len(rec)


def coverage(item_set, all_recs):
    shown = set()
    for r in all_recs:
        shown.update(r)
    return sum(1 for i in item_set if i in shown) / len(item_set)


def dpf(head, tail, all_recs):
    return coverage(head, all_recs) - coverage(tail, all_recs)


def rdp_integral(q, sigma, alpha, dps=30):
    """RDP of the sampled Gaussian by high-precision quadrature of E_mu0[(mu / mu0)^alpha].

    mu0 = N(0, sigma^2) and mu = (1 - q) mu0 + q N(1, sigma^2). The integrand's
    mass lies between a few sigma below 0 and a few sigma above alpha, so that
    interval is cut into sigma-wide pieces.
    """
    with mpmath.workdps(dps):
        q, sigma, alpha = mpmath.mpf(q), mpmath.mpf(sigma), mpmath.mpf(alpha)

        def integrand(z):
            log_mu0 = -z * z / (2 * sigma**2)
            log_mu1 = -((z - 1) ** 2) / (2 * sigma**2)
            mix = (1 - q) * mpmath.exp(log_mu0) + q * mpmath.exp(log_mu1)
            return mpmath.exp(alpha * mpmath.log(mix) + (1 - alpha) * log_mu0) / mpmath.sqrt(2 * mpmath.pi * sigma**2)

        lo, hi = -12 * sigma, alpha + 12 * sigma
        pieces = int(mpmath.ceil((hi - lo) / sigma))
        points = [-mpmath.inf] + [lo + (hi - lo) * n / pieces for n in range(pieces + 1)] + [mpmath.inf]
        return float(mpmath.log(mpmath.quad(integrand, points)) / (alpha - 1))


def rdp_q1(sigma, alpha):
    return alpha / (2 * sigma**2)


def binomial_log_a_exact(q, sigma, alpha):
    """log A_alpha for integer alpha by the binomial expansion with exact coefficients."""
    total = 0.0
    for k in range(alpha + 1):
        coef = Fraction(math.comb(alpha, k)) * Fraction(q).limit_denominator(10**12) ** k
        coef *= Fraction(1 - q).limit_denominator(10**12) ** (alpha - k)
        total += float(coef) * math.exp((k * k - k) / (2 * sigma**2))
    return math.log(total)
