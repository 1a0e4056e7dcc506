"""Effective sample sizes and effective numbers of cases for survey estimates.

A design-based variance ``tau2`` for an estimated proportion ``z`` is turned
into the simple-random-sample size whose binomial variance matches it, and
the matching number of successes. Those two integers form the working
binomial observation used by the sampler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

DEFAULT_EPS = 0.005


@dataclass(frozen=True)
class SurveyEstimate:
    """One areal estimate of a proportion."""

    area_id: str
    period_len: int
    end_year: int
    estimate: float
    std_error: float
    raw_sample_size: Optional[int] = None

    def __post_init__(self):
        if not (0.0 <= self.estimate <= 1.0):
            raise ValueError(f"{self.area_id}: estimate {self.estimate} outside [0, 1]")
        if not (self.std_error >= 0.0):  # also rejects NaN
            raise ValueError(f"{self.area_id}: std_error must be >= 0, got {self.std_error}")
        if self.period_len < 1:
            raise ValueError(f"{self.area_id}: period_len must be >= 1")
        if self.raw_sample_size is not None and self.raw_sample_size < 1:
            raise ValueError(f"{self.area_id}: raw_sample_size must be positive")

    @property
    def variance(self) -> float:
        return self.std_error**2


@dataclass(frozen=True)
class EffectiveCounts:
    ess: int
    enc: int
    clamped: bool = False

    def __post_init__(self):
        if not (0 <= self.enc <= self.ess):
            raise ValueError(f"need 0 <= enc <= ess, got enc={self.enc}, ess={self.ess}")


@dataclass(frozen=True)
class DesignEffectSpec:
    d: float
    srs_sample_size: int

    def __post_init__(self):
        if self.d < 1.0:
            raise ValueError("design effect d must be >= 1")
        if self.srs_sample_size < 1:
            raise ValueError("srs_sample_size must be >= 1")


def round_half_away(x: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def _clamp(z: float, eps: float) -> tuple[float, bool]:
    if not (0.0 < eps < 0.5):
        raise ValueError("eps must lie in (0, 0.5)")
    zc = min(max(z, eps), 1.0 - eps)
    return zc, zc != z


def effective_sample_size(est: SurveyEstimate, eps: float = DEFAULT_EPS) -> int:
    """Rounded ``z(1 - z) / tau2`` with ``z`` clamped into ``[eps, 1 - eps]``, floored at 1."""
    if math.isnan(est.estimate) or math.isnan(est.std_error):
        raise ValueError("NaN survey estimate")
    if est.std_error == 0.0:
        raise ValueError(f"{est.area_id}: zero design variance, effective sample size undefined")
    z, _ = _clamp(est.estimate, eps)
    return max(1, round_half_away(z * (1.0 - z) / est.variance))


def effective_number_of_cases(ess: int, est: SurveyEstimate, eps: float = DEFAULT_EPS) -> int:
    """Rounded ``ess * z`` (same clamp as the sample size), kept within ``[0, ess]``."""
    if ess < 1:
        raise ValueError("ess must be >= 1")
    z, _ = _clamp(est.estimate, eps)
    return min(max(round_half_away(ess * z), 0), ess)


def effective_counts(est: SurveyEstimate, eps: float = DEFAULT_EPS) -> EffectiveCounts:
    ess = effective_sample_size(est, eps)
    enc = effective_number_of_cases(ess, est, eps)
    _, clamped = _clamp(est.estimate, eps)
    return EffectiveCounts(ess=ess, enc=enc, clamped=clamped)


def logit_noise_variance(pi_true, spec: DesignEffectSpec):
    """Logit-scale noise variance giving ``d`` times the SRS variance of a proportion.

    Delta-method form ``d (e^l + 1)^4 pi (1 - pi) / (m e^{2l})`` with
    ``l = logit(pi)``. Accepts scalars or arrays.
    """
    p = np.asarray(pi_true, dtype=np.float64)
    if np.any((p <= 0.0) | (p >= 1.0)) or np.any(np.isnan(p)):
        raise ValueError("pi_true must lie strictly inside (0, 1)")
    lg = np.log(p) - np.log1p(-p)
    v = spec.d * (np.exp(lg) + 1.0) ** 4 * p * (1.0 - p) / (spec.srs_sample_size * np.exp(2.0 * lg))
    return float(v) if np.ndim(v) == 0 else v
