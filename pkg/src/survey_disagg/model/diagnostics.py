"""Convergence diagnostics: Geweke z-scores and chain effective sample size."""
from __future__ import annotations

import numpy as np


def autocovariance(x) -> np.ndarray:
    """Biased sample autocovariances at lags ``0 .. n-1`` via FFT."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def spectral_zero(x) -> float:
    """Spectral density at frequency zero (long-run variance).

    Uses Geyer's initial monotone sequence: sums of adjacent autocovariance
    pairs are truncated at the first non-positive pair and forced to be
    non-increasing.
    """
    gamma = autocovariance(x)
    n = gamma.shape[0]
    if gamma[0] <= 0.0:
        return 0.0
    n_pairs = n // 2
    pairs = gamma[0:2 * n_pairs:2] + gamma[1:2 * n_pairs:2]
    nonpos = np.flatnonzero(pairs <= 0.0)
    m = nonpos[0] if nonpos.size else n_pairs
    pairs = np.minimum.accumulate(pairs[:m])
    return max(-gamma[0] + 2.0 * pairs.sum(), gamma[0] / n)


def chain_ess(x) -> float:
    """Effective number of independent draws in an autocorrelated chain (0 for a constant chain)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return float(n)
    gamma0 = float(np.var(x))
    if gamma0 <= 1e-300 * max(1.0, float(np.mean(x * x))):
        return 0.0
    return float(n * gamma0 / spectral_zero(x))


def geweke(x, frac_a: float = 0.1, frac_b: float = 0.5) -> float:
    """Geweke z-score comparing the means of the first and last parts of a chain."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 100:
        raise ValueError("geweke needs a chain of length >= 100")
    if not (0 < frac_a and 0 < frac_b and frac_a + frac_b <= 1):
        raise ValueError("window fractions must be positive and sum to at most 1")
    a = x[: int(frac_a * n)]
    b = x[n - int(frac_b * n):]
    var = spectral_zero(a) / a.shape[0] + spectral_zero(b) / b.shape[0]
    if not var > 0.0:
        raise ValueError("degenerate chain: zero variance in a Geweke window")
    return float((a.mean() - b.mean()) / np.sqrt(var))
