"""Closed-form density, CDF, moment, and sampling math for the target laws.

Two families are supported: normal (real-valued targets) and log-normal
(strictly positive targets, normal in log space). All functions are pure and
thread-safe; rng instances must not be shared across threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class DistKind(enum.Enum):
    NORMAL = "normal"
    LOGNORMAL = "lognormal"


@dataclass(frozen=True)
class DistParams:
    """Location/scale pair: mu locates y (normal) or ln y (log-normal)."""

    mu: float
    sigma2: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma2)):
            raise ValueError(f"non-finite distribution params ({self.mu}, {self.sigma2})")
        if self.sigma2 < 0.0:
            raise ValueError(f"negative variance parameter {self.sigma2}")


def log_pdf(kind: DistKind, params: DistParams, y: float) -> float:
    """Log density at y. Log-normal requires y > 0."""
    if params.sigma2 <= 0.0:
        raise ValueError("log_pdf needs sigma2 > 0")
    if kind is DistKind.NORMAL:
        return -0.5 * (LOG_2PI + math.log(params.sigma2)) - (y - params.mu) ** 2 / (2.0 * params.sigma2)
    if y <= 0.0:
        raise ValueError(f"log-normal density undefined at y={y} (must be > 0)")
    ly = math.log(y)
    return -0.5 * (LOG_2PI + math.log(params.sigma2)) - ly - (ly - params.mu) ** 2 / (2.0 * params.sigma2)


def mean(kind: DistKind, params: DistParams) -> float:
    if kind is DistKind.NORMAL:
        return params.mu
    return math.exp(params.mu + 0.5 * params.sigma2)


def variance(kind: DistKind, params: DistParams) -> float:
    if kind is DistKind.NORMAL:
        return params.sigma2
    return math.expm1(params.sigma2) * math.exp(2.0 * params.mu + params.sigma2)


def standard_normal_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def cdf(kind: DistKind, params: DistParams, y: float) -> float:
    """Cumulative probability at y; log-normal mass below 0 is defined as 0."""
    if params.sigma2 <= 0.0:
        raise ValueError("cdf needs sigma2 > 0")
    sigma = math.sqrt(params.sigma2)
    if kind is DistKind.NORMAL:
        return standard_normal_cdf((y - params.mu) / sigma)
    if y <= 0.0:
        return 0.0
    return standard_normal_cdf((math.log(y) - params.mu) / sigma)


def _box_muller(u1: float, u2: float) -> float:
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def sample(kind: DistKind, params: DistParams, rng) -> float:
    """One draw via Box-Muller on the rng's uniform stream.

    rng needs a ``random()`` method returning uniforms in [0, 1); both
    ``random.Random`` and ``numpy.random.Generator`` qualify.
    """
    u1 = 1.0 - rng.random()
    u2 = rng.random()
    z = _box_muller(u1, u2)
    loc = params.mu + math.sqrt(params.sigma2) * z
    return loc if kind is DistKind.NORMAL else math.exp(loc)


def sample_many(kind: DistKind, params: DistParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized Box-Muller draws (same math as sample, array-shaped)."""
    u1 = 1.0 - rng.random(n)
    u2 = rng.random(n)
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    loc = params.mu + math.sqrt(params.sigma2) * z
    return loc if kind is DistKind.NORMAL else np.exp(loc)
