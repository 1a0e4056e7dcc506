"""Numpy implementations of the compiled kernels (same signatures)."""
import numpy as np
from scipy.special import log_ndtr, ndtri


def _tn_above(a, u):
    """Inverse-CDF draw of N(0, 1) truncated to (a, inf) from uniforms ``u``."""
    # P(Z > z) = Phi(-z); map u in (0, 1) onto (0, Phi(-a)) and invert
    log_tail = log_ndtr(-a)
    z = -ndtri(u * np.exp(log_tail))
    # beyond double range of Phi(-a) the tail is exponential with rate a
    far = log_tail < -700.0
    if np.any(far):
        z = np.where(far, a - np.log1p(-u) / np.maximum(a, 1e-300), z)
    return np.maximum(z, a)


def tn_sum_exact(mu, n_pos, n_neg, bit_generator):
    mu = np.asarray(mu, dtype=np.float64)
    n_pos = np.asarray(n_pos, dtype=np.int64)
    n_neg = np.asarray(n_neg, dtype=np.int64)
    rng = np.random.Generator(bit_generator)
    out = np.zeros(mu.shape[0])
    idx = np.arange(mu.shape[0])
    if n_pos.sum() > 0:
        cell = np.repeat(idx, n_pos)
        m = mu[cell]
        draws = m + _tn_above(-m, rng.random(cell.shape[0]))
        out += np.bincount(cell, weights=draws, minlength=mu.shape[0])
    if n_neg.sum() > 0:
        cell = np.repeat(idx, n_neg)
        m = mu[cell]
        draws = m - _tn_above(m, rng.random(cell.shape[0]))
        out += np.bincount(cell, weights=draws, minlength=mu.shape[0])
    return out


def points_in_rings(pts, verts, ring_start):
    pts = np.asarray(pts, dtype=np.float64)
    x = pts[:, 0][:, None]
    y = pts[:, 1][:, None]
    inside = np.zeros(pts.shape[0], dtype=bool)
    for r in range(len(ring_start) - 1):
        ring = verts[ring_start[r]:ring_start[r + 1]]
        x1, y1 = ring[:-1, 0][None, :], ring[:-1, 1][None, :]
        x2, y2 = ring[1:, 0][None, :], ring[1:, 1][None, :]
        straddle = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = (x2 - x1) * (y - y1) / (y2 - y1) + x1
        crossings = np.count_nonzero(straddle & (x < x_cross), axis=1)
        inside ^= (crossings % 2).astype(bool)
    return inside
