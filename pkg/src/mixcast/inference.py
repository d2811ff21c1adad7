"""Predictive quantities from a mixture output: point prediction, decomposed
uncertainty, mixture CDF, quantiles via bracketed bisection, and intervals.

All functions are pure over an immutable MixtureOutput, so batch inference can
fan out freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import distributions as dist
from .distributions import DistKind
from .model import MixtureOutput

QUANTILE_TOL = 1e-9
BRACKET_DOUBLINGS = 60
BISECT_ITERS = 200
DEFAULT_ALPHAS = (0.1, 0.3, 0.5, 0.7, 0.9)


@dataclass
class ForecastResult:
    mean: float
    aleatoric: float
    mixture_unc: float
    total: float
    quantiles: dict[float, float] = field(default_factory=dict)
    intervals: list[tuple[float, float, float, float]] = field(default_factory=list)
    timestamp: float | None = None


def predictive_mean(output: MixtureOutput, kind: DistKind) -> float:
    """Weight-averaged per-source predictive means."""
    return float(sum(w * dist.mean(kind, p) for w, p in zip(output.weights, output.dist_params)))


def predictive_uncertainty(output: MixtureOutput, kind: DistKind) -> tuple[float, float, float]:
    """(aleatoric, mixture, total) variance decomposition.

    Aleatoric is the weighted per-source variance; mixture is the weighted
    second moment of per-source means minus the squared overall mean. A
    mixture term within -1e-12 of zero is clamped to zero.
    """
    w = output.weights
    means = np.array([dist.mean(kind, p) for p in output.dist_params])
    variances = np.array([dist.variance(kind, p) for p in output.dist_params])
    aleatoric = float(np.dot(w, variances))
    overall = float(np.dot(w, means))
    mixture = float(np.dot(w, means * means) - overall * overall)
    if mixture < 0.0:
        if mixture < -1e-12 * max(1.0, abs(float(np.dot(w, means * means)))):
            raise ArithmeticError(f"mixture variance {mixture} is negative beyond tolerance")
        mixture = 0.0
    return aleatoric, mixture, aleatoric + mixture


def mixture_cdf(output: MixtureOutput, kind: DistKind, y: float) -> float:
    """Weight-averaged per-source CDFs."""
    return float(sum(w * dist.cdf(kind, p, y) for w, p in zip(output.weights, output.dist_params)))


def quantile(output: MixtureOutput, kind: DistKind, alpha: float) -> float:
    """Root of mixture_cdf(y) - alpha by bracketing plus bisection."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"quantile level must be in (0, 1), got {alpha}")
    center = predictive_mean(output, kind)
    _, _, total = predictive_uncertainty(output, kind)
    half = 10.0 * math.sqrt(max(total, 1e-30))

    lo, hi = center - half, center + half
    if kind is DistKind.LOGNORMAL:
        lo = max(lo, 0.0)
    doublings = 0
    while mixture_cdf(output, kind, lo) > alpha:
        doublings += 1
        if doublings > BRACKET_DOUBLINGS:
            raise ArithmeticError(f"no lower bracket for quantile {alpha} after {BRACKET_DOUBLINGS} doublings")
        half *= 2.0
        lo = center - half
        if kind is DistKind.LOGNORMAL:
            lo = max(lo, 0.0)
    while mixture_cdf(output, kind, hi) < alpha:
        doublings += 1
        if doublings > BRACKET_DOUBLINGS:
            raise ArithmeticError(f"no upper bracket for quantile {alpha} after {BRACKET_DOUBLINGS} doublings")
        half *= 2.0
        hi = center + half

    mid = 0.5 * (lo + hi)
    for _ in range(BISECT_ITERS):
        mid = 0.5 * (lo + hi)
        c = mixture_cdf(output, kind, mid)
        if abs(c - alpha) <= QUANTILE_TOL:
            return mid
        if c < alpha:
            lo = mid
        else:
            hi = mid
    return mid


def interval(output: MixtureOutput, kind: DistKind, alpha_lo: float, alpha_hi: float) -> tuple[float, float]:
    if not 0.0 < alpha_lo < alpha_hi < 1.0:
        raise ValueError(f"need 0 < alpha_lo < alpha_hi < 1, got ({alpha_lo}, {alpha_hi})")
    return quantile(output, kind, alpha_lo), quantile(output, kind, alpha_hi)


def forecast(
    output: MixtureOutput,
    kind: DistKind,
    alphas=DEFAULT_ALPHAS,
    intervals=((0.1, 0.9),),
    timestamp: float | None = None,
) -> ForecastResult:
    aleatoric, mixture_unc, total = predictive_uncertainty(output, kind)
    qs = {float(a): quantile(output, kind, a) for a in alphas}
    ivs = []
    for a_lo, a_hi in intervals:
        lo = qs.get(a_lo, None)
        hi = qs.get(a_hi, None)
        lo = lo if lo is not None else quantile(output, kind, a_lo)
        hi = hi if hi is not None else quantile(output, kind, a_hi)
        ivs.append((a_lo, a_hi, lo, hi))
    return ForecastResult(
        mean=predictive_mean(output, kind),
        aleatoric=aleatoric,
        mixture_unc=mixture_unc,
        total=total,
        quantiles=qs,
        intervals=ivs,
        timestamp=timestamp,
    )


def forecast_record(result: ForecastResult, weights: np.ndarray) -> dict:
    """Flat JSON-ready record for one instance (q10..q90 schema)."""
    rec = {
        "timestamp": result.timestamp,
        "mean": result.mean,
        "aleatoric": result.aleatoric,
        "mixture": result.mixture_unc,
        "total": result.total,
    }
    for a in DEFAULT_ALPHAS:
        rec[f"q{int(round(a * 100))}"] = result.quantiles[a]
    rec["weights"] = [float(w) for w in weights]
    return rec


def sample_mixture(output: MixtureOutput, kind: DistKind, n: int, rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo draws from the mixture (component choice + Box-Muller)."""
    cum = np.cumsum(output.weights)
    cum[-1] = 1.0
    idx = np.searchsorted(cum, rng.random(n), side="right")
    mu = np.array([p.mu for p in output.dist_params])[idx]
    sigma = np.sqrt(np.array([p.sigma2 for p in output.dist_params]))[idx]
    u1 = 1.0 - rng.random(n)
    u2 = rng.random(n)
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    loc = mu + sigma * z
    return loc if kind is DistKind.NORMAL else np.exp(loc)
