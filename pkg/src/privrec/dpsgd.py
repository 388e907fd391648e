"""Per-example clipping, Gaussian noising, SGD updates and RDP accounting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, special

DEFAULT_DELTA = 1e-5
DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, 1.75, *map(float, range(2, 65)), 128.0, 256.0)


@dataclass(frozen=True)
class ClipNoiseSpec:
    clip_norm: float
    noise_multiplier: float
    batch_size: int
    sample_rate: float

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.noise_multiplier >= 0:
            raise ValueError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.sample_rate <= 1:
            raise ValueError(f"sample_rate must be in (0, 1], got {self.sample_rate}")

    @classmethod
    def for_dataset(cls, clip_norm: float, noise_multiplier: float, batch_size: int, n_examples: int) -> "ClipNoiseSpec":
        return cls(clip_norm, noise_multiplier, batch_size, min(1.0, batch_size / n_examples))


def _require_finite(g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("gradient has non-finite entries")


def clip(g: np.ndarray, clip_norm: float) -> np.ndarray:
    """Scale ``g`` down to l2-norm ``clip_norm``; gradients already inside are returned unchanged."""
    if not clip_norm > 0:
        raise ValueError(f"clip_norm must be > 0, got {clip_norm}")
    g = np.asarray(g, dtype=float)
    _require_finite(g)
    norm = float(np.linalg.norm(g))
    if norm <= clip_norm:
        return g.copy()
    return g / (norm / clip_norm)


def clip_factors(norms: np.ndarray, clip_norm: float) -> np.ndarray:
    """Per-example multipliers 1 / max(1, norm / C)."""
    return 1.0 / np.maximum(1.0, norms / clip_norm)


def gaussian_noise(size: int, spec: ClipNoiseSpec, rng: np.random.Generator) -> np.ndarray | None:
    """Noise for the summed gradient, std sigma * C per coordinate; None when sigma is 0."""
    if spec.noise_multiplier == 0:
        return None
    return rng.standard_normal(size) * (spec.noise_multiplier * spec.clip_norm)


def aggregate_and_noise(clipped: Sequence[np.ndarray], spec: ClipNoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Mean of clipped gradients plus N(0, (sigma C)^2 I) / B."""
    if len(clipped) == 0:
        raise ValueError("empty batch")
    stacked = np.vstack([np.asarray(g, dtype=float) for g in clipped])
    _require_finite(stacked)
    norms = np.linalg.norm(stacked, axis=1)
    if np.any(norms > spec.clip_norm * (1 + 1e-9)):
        raise ValueError(f"input gradient norm {norms.max():.6g} exceeds clip norm {spec.clip_norm}")
    total = stacked.sum(axis=0)
    noise = gaussian_noise(total.size, spec, rng)
    if noise is not None:
        total = total + noise
    return total / len(clipped)


def sgd_update(params: np.ndarray, noisy: np.ndarray, lr: float, weight_decay: float = 0.0) -> np.ndarray:
    """theta - lr * (g + weight_decay * theta)."""
    params = np.asarray(params, dtype=float)
    noisy = np.asarray(noisy, dtype=float)
    if params.shape != noisy.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs gradient {noisy.shape}")
    if weight_decay:
        return params - lr * (noisy + weight_decay * params)
    return params - lr * noisy


def sgd_update_(params: np.ndarray, grad: np.ndarray, lr: float, weight_decay: float = 0.0) -> None:
    """In-place form of :func:`sgd_update` used by the training loops."""
    if weight_decay:
        grad = grad + weight_decay * params
    params -= lr * grad


# ------------------------------------------------------------- accounting


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_comb(n: float, k: float) -> float:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    # log E_{z~mu0}[(mu(z)/mu0(z))^alpha] for mu = (1-q) mu0 + q mu1, expanded binomially
    log_a = -math.inf
    log_q, log_1mq = math.log(q), math.log1p(-q)
    for i in range(alpha + 1):
        term = _log_comb(alpha, i) + i * log_q + (alpha - i) * log_1mq + (i * i - i) / (2 * sigma**2)
        log_a = _log_add(log_a, term)
    return log_a


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    # Direct quadrature of the same moment. The integrand is scaled by its
    # maximum on a grid so the integral stays O(1) even when log A is large;
    # mass sits near z = 0 and z = alpha, and tails past 12 sigma are negligible.
    log_q, log_1mq = math.log(q), math.log1p(-q)
    norm = -0.5 * math.log(2 * math.pi) - math.log(sigma)

    def log_f(z):
        mix = np.logaddexp(log_1mq, log_q + (2 * z - 1) / (2 * sigma**2))
        return norm - z * z / (2 * sigma**2) + alpha * mix

    lo, hi = -12 * sigma, alpha + 12 * sigma
    peak = float(np.max(log_f(np.linspace(lo, hi, 4001))))
    value, _ = integrate.quad(lambda z: math.exp(log_f(z) - peak), lo, hi,
                              points=sorted({0.0, alpha}), epsabs=0.0, epsrel=1e-11, limit=200)
    return peak + math.log(value)


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP of one step of the Poisson-subsampled Gaussian mechanism at order ``alpha``."""
    if not 0 < q <= 1:
        raise ValueError(f"sample rate must be in (0, 1], got {q}")
    if not sigma > 0:
        raise ValueError(f"noise multiplier must be > 0, got {sigma}")
    if not alpha > 1:
        raise ValueError(f"order must be > 1, got {alpha}")
    if q == 1.0:
        return alpha / (2 * sigma**2)
    if math.isinf(sigma):
        return 0.0
    if float(alpha).is_integer():
        return max(_log_a_int(q, sigma, int(alpha)) / (alpha - 1), 0.0)
    return max(_log_a_frac(q, sigma, alpha) / (alpha - 1), 0.0)


@dataclass
class PrivacyLedger:
    sample_rate: float
    noise_multiplier: float
    orders: tuple[float, ...] = DEFAULT_ORDERS
    steps: int = 0
    _rdp: np.ndarray | None = field(default=None, repr=False, compare=False)

    def step(self, n: int = 1) -> None:
        self.steps += n

    def rdp_per_step(self) -> np.ndarray:
        if self._rdp is None:
            if self.noise_multiplier == 0:
                self._rdp = np.full(len(self.orders), math.inf)
            else:
                self._rdp = np.array([rdp_subsampled_gaussian(self.sample_rate, self.noise_multiplier, a) for a in self.orders])
        return self._rdp

    def epsilon(self, delta: float = DEFAULT_DELTA) -> float:
        return ledger_epsilon(self, delta)

    def to_dict(self, delta: float = DEFAULT_DELTA) -> dict:
        eps = self.epsilon(delta)
        return {
            "steps": self.steps,
            "sample_rate": self.sample_rate,
            "noise_multiplier": self.noise_multiplier,
            "delta": delta,
            "epsilon": eps if math.isfinite(eps) else "inf",
        }


def ledger_epsilon(ledger: PrivacyLedger, delta: float = DEFAULT_DELTA) -> float:
    """min over orders of T * rdp(alpha) + log(1/delta) / (alpha - 1)."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    if ledger.steps < 0:
        raise ValueError("negative step count")
    if ledger.steps == 0:
        return 0.0
    orders = np.asarray(ledger.orders, dtype=float)
    with np.errstate(invalid="ignore"):
        eps = ledger.steps * ledger.rdp_per_step() + math.log(1 / delta) / (orders - 1)
    return float(np.nanmin(eps))


def noise_multiplier_for(epsilon: float, delta: float = DEFAULT_DELTA) -> float:
    """Single-step Gaussian calibration sqrt(2 ln(1.25/delta)) / epsilon.

    Only a starting point: reported budgets come from :func:`ledger_epsilon`.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    if not 0 < delta < 1.25:
        raise ValueError(f"delta must be in (0, 1.25), got {delta}")
    return math.sqrt(2 * math.log(1.25 / delta)) / epsilon
