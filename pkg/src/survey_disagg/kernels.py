"""Backend selection for the hot inner loops.

The compiled extension is used when it was built; otherwise (or when
``SURVEY_DISAGG_PURE_PYTHON=1``) the numpy versions are used. Both backends
sample the same distributions but consume random numbers differently, so
draws are reproducible per backend, not across backends.
"""
import logging
import os

import numpy as np
from scipy.special import log_ndtr

from . import _kernels_py

logger = logging.getLogger(__name__)

_compiled = None
if os.environ.get("SURVEY_DISAGG_PURE_PYTHON", "0") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py

#: per-cell trial count above which a cell's latent sum is drawn from its
#: moment-matched normal approximation instead of trial by trial
DEFAULT_EXACT_MAX = 64


def _backend(name):
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


def truncnorm_moments(mu, positive):
    """Mean and variance of ``N(mu, 1)`` truncated to (0, inf) or (-inf, 0]."""
    mu = np.asarray(mu, dtype=np.float64)
    # inverse Mills ratio, computed in log space
    if positive:
        lam = np.exp(-0.5 * mu**2 - 0.5 * np.log(2 * np.pi) - log_ndtr(mu))
        mean = mu + lam
        var = 1.0 - lam * (lam + mu)
    else:
        lam = np.exp(-0.5 * mu**2 - 0.5 * np.log(2 * np.pi) - log_ndtr(-mu))
        mean = mu - lam
        var = 1.0 - lam * (lam - mu)
    return mean, np.maximum(var, 1e-12)


def tn_sums(mu, n_pos, n_neg, rng, exact_max=DEFAULT_EXACT_MAX, backend=None):
    """Per-cell sums of probit latent variables.

    Cell ``i`` contributes ``n_pos[i]`` draws of ``N(mu[i], 1)`` truncated to
    the positive half-line and ``n_neg[i]`` draws truncated to the negative
    one. Counts above ``exact_max`` use a moment-matched normal for the sum.
    """
    impl = _backend(backend)
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    n_pos = np.ascontiguousarray(n_pos, dtype=np.int64)
    n_neg = np.ascontiguousarray(n_neg, dtype=np.int64)
    out = np.zeros(mu.shape[0])

    big_pos = n_pos > exact_max
    big_neg = n_neg > exact_max
    ex_pos = np.where(big_pos, 0, n_pos)
    ex_neg = np.where(big_neg, 0, n_neg)
    if ex_pos.any() or ex_neg.any():
        out += impl.tn_sum_exact(mu, ex_pos, ex_neg, rng.bit_generator)
    for big, counts, positive in ((big_pos, n_pos, True), (big_neg, n_neg, False)):
        if big.any():
            m, v = truncnorm_moments(mu[big], positive)
            c = counts[big]
            out[big] += c * m + np.sqrt(c * v) * rng.standard_normal(c.shape[0])
    return out


def points_in_rings(pts, rings, backend=None):
    """Even-odd containment test of points against a list of closed rings."""
    impl = _backend(backend)
    verts = np.ascontiguousarray(np.vstack(rings), dtype=np.float64)
    ring_start = np.zeros(len(rings) + 1, dtype=np.int64)
    ring_start[1:] = np.cumsum([len(r) for r in rings])
    pts = np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 2)
    return np.asarray(impl.points_in_rings(pts, verts, ring_start), dtype=bool)
