"""Spatio-temporal multi-resolution approximation (ST-MRA).

The spatial domain is split recursively into a quadtree. Every partition
carries ``r`` knots; basis functions at level ``m`` are the remainder
covariance ``v_m`` between a location and the knots of the level-``m``
partition that contains it, so only one partition per level contributes at
any location. Weights follow a stationary AR(1) in time.

Basis functions are computed from the unit-variance Matérn correlation. The
marginal variance ``sigma2`` is carried by the weight covariance
(``K = sigma2 * K_unit``), which leaves the implied covariance of the field
unchanged and makes ``sigma2`` conjugate.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import kve

NU_BOUNDS = (0.05, 1.95)
MAX_JITTER = 1e-4
_SPLINE_MIN_SIZE = 4096
_SPLINE_NODES = 1536


@dataclass(frozen=True)
class MaternParams:
    sigma2: float
    phi: float
    nu: float

    def __post_init__(self):
        if not (self.sigma2 > 0):
            raise ValueError("sigma2 must be positive")
        if not (self.phi > 0):
            raise ValueError("phi must be positive")
        if not (0 < self.nu < 2):
            raise ValueError("nu must lie in (0, 2)")


def matern_corr(h, phi: float, nu: float):
    """Unit-variance Matérn correlation at distances ``h``."""
    h = np.asarray(h, dtype=np.float64)
    if not np.all(np.isfinite(h)):
        raise ValueError("distances must be finite")
    if np.any(h < 0):
        raise ValueError("distances must be nonnegative")
    x = h / phi
    out = np.ones_like(x)
    pos = x > 0
    if np.any(pos):
        xp = x[pos]
        # x^nu K_nu(x) with the exponentially scaled Bessel function
        log_val = (
            (1.0 - nu) * math.log(2.0) - math.lgamma(nu) + nu * np.log(xp) + np.log(kve(nu, xp)) - xp
        )
        out[pos] = np.exp(log_val)
    return out


def matern_cov(h, p: MaternParams):
    """Matérn covariance ``sigma2 / (2^(nu-1) Gamma(nu)) (h/phi)^nu K_nu(h/phi)``; ``sigma2`` at 0."""
    out = p.sigma2 * matern_corr(h, p.phi, p.nu)
    return float(out) if np.ndim(out) == 0 else out


class _LogGridPlan:
    """Cubic-spline evaluation of the correlation at a fixed set of distances.

    Bin positions on a uniform log-distance grid are computed once, so each
    new ``(phi, nu)`` costs one Bessel evaluation per grid node plus a gather.
    """

    def __init__(self, h, nodes: int = _SPLINE_NODES):
        h = np.asarray(h, dtype=np.float64)
        self.shape = h.shape
        flat = h.ravel()
        self.pos = np.flatnonzero(flat > 0)
        logh = np.log(flat[self.pos])
        lo, hi = logh.min() - 1e-6, logh.max() + 1e-6
        self.grid = np.linspace(lo, hi, nodes)
        dx = self.grid[1] - self.grid[0]
        self.idx = np.clip(((logh - lo) / dx).astype(np.int64), 0, nodes - 2)
        self.t = logh - self.grid[self.idx]

    def __call__(self, phi, nu):
        c = CubicSpline(self.grid, matern_corr(np.exp(self.grid), phi, nu)).c[:, self.idx]
        out = np.ones(int(np.prod(self.shape)))
        t = self.t
        out[self.pos] = ((c[0] * t + c[1]) * t + c[2]) * t + c[3]
        return out.reshape(self.shape)


def _corr_with_plan(h, plan, phi, nu):
    if plan is None:
        return matern_corr(h, phi, nu)
    return plan(phi, nu)


# ---------------------------------------------------------------------------
# knot tree


@dataclass
class KnotTree:
    domain: tuple
    M: int
    J: int
    r: int
    rects: list  # per level: (J^m, 4) arrays of x0, y0, x1, y1
    knots: list  # per level: (J^m, r, 2)
    placement: str = "grid"

    @property
    def split(self) -> int:
        return int(round(math.sqrt(self.J)))

    def n_partitions(self, level: int) -> int:
        return self.J**level

    @property
    def total_partitions(self) -> int:
        return sum(self.J**m for m in range(self.M + 1))

    def block_offset(self, level: int) -> int:
        return sum(self.J**m for m in range(level))

    @property
    def n_basis(self) -> int:
        return self.total_partitions * self.r

    def ancestor(self, level: int, j, to_level: int):
        return np.asarray(j) // self.J ** (level - to_level)

    def in_domain(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        x0, y0, x1, y1 = self.domain
        return (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)

    def locate(self, pts, level: int) -> np.ndarray:
        """Index of the level-``level`` partition containing each point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        s = self.split
        idx = np.zeros(len(pts), dtype=np.int64)
        x0 = np.full(len(pts), self.domain[0])
        y0 = np.full(len(pts), self.domain[1])
        w = np.full(len(pts), self.domain[2] - self.domain[0])
        hgt = np.full(len(pts), self.domain[3] - self.domain[1])
        for _ in range(level):
            w, hgt = w / s, hgt / s
            kx = np.clip(np.floor((pts[:, 0] - x0) / w), 0, s - 1).astype(np.int64)
            ky = np.clip(np.floor((pts[:, 1] - y0) / hgt), 0, s - 1).astype(np.int64)
            idx = idx * self.J + ky * s + kx
            x0 = x0 + kx * w
            y0 = y0 + ky * hgt
        return idx


def build_knot_tree(domain, M: int = 2, J: int = 4, r: int = 9, placement: str = "grid") -> KnotTree:
    """Quadtree of ``M + 1`` levels with ``r`` grid knots per partition."""
    x0, y0, x1, y1 = (float(v) for v in domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError("domain must be a rectangle with positive extent")
    if M < 0 or M > 8:
        raise ValueError("M must lie in 0..8")
    s = int(round(math.sqrt(J)))
    if J < 2 or s * s != J:
        raise ValueError("J must be a perfect square >= 4 for quadtree splits")
    if placement != "grid":
        raise ValueError(f"unknown knot placement {placement!r}")
    k = int(round(math.sqrt(r)))
    if r < 1 or k * k != r:
        raise ValueError("r must be a perfect square for grid placement")

    rects = [np.array([[x0, y0, x1, y1]])]
    for _ in range(M):
        prev = rects[-1]
        children = np.empty((len(prev) * J, 4))
        for j, (a0, b0, a1, b1) in enumerate(prev):
            w, h = (a1 - a0) / s, (b1 - b0) / s
            for ky in range(s):
                for kx in range(s):
                    children[j * J + ky * s + kx] = (a0 + kx * w, b0 + ky * h, a0 + (kx + 1) * w, b0 + (ky + 1) * h)
        rects.append(children)

    offs = (np.arange(k) + 0.5) / k
    gx, gy = np.meshgrid(offs, offs)
    unit = np.column_stack([gx.ravel(), gy.ravel()])
    knots = []
    for level_rects in rects:
        a0, b0, a1, b1 = (level_rects[:, i][:, None] for i in range(4))
        kx = a0 + unit[None, :, 0] * (a1 - a0)
        ky = b0 + unit[None, :, 1] * (b1 - b0)
        knots.append(np.stack([kx, ky], axis=-1))
    return KnotTree((x0, y0, x1, y1), M, J, r, rects, knots, placement)


# ---------------------------------------------------------------------------
# basis system


def _pairwise(a, b):
    return np.sqrt(np.maximum(((a[..., :, None, :] - b[..., None, :, :]) ** 2).sum(-1), 0.0))


def _knot_geometry(tree: KnotTree):
    """Ancestor indices and knot-to-knot distances used by the recursion (cached on the tree)."""
    cached = getattr(tree, "_geometry", None)
    if cached is not None:
        return cached
    anc, cross, self_d = [], [], []
    for m in range(tree.M + 1):
        j = np.arange(tree.J**m)
        a = np.stack([tree.ancestor(m, j, l) for l in range(m)], axis=1) if m else np.zeros((len(j), 0), int)
        Q = tree.knots[m]
        anc.append(a)
        cross.append([_pairwise(Q, tree.knots[l][a[:, l]]) for l in range(m)])
        self_d.append(_pairwise(Q, Q))
    tree._geometry = (anc, cross, self_d)
    return tree._geometry


def _chol_with_jitter(v, jitter, level):
    """Batched Cholesky of ``v + jit I`` with per-block escalation on failure."""
    r = v.shape[-1]
    eye = np.eye(r)
    try:
        return np.linalg.cholesky(v + jitter * eye), np.full(len(v), jitter)
    except np.linalg.LinAlgError:
        pass
    L = np.empty_like(v)
    used = np.empty(len(v))
    for j in range(len(v)):
        jit = jitter
        while True:
            try:
                L[j] = np.linalg.cholesky(v[j] + jit * eye)
                break
            except np.linalg.LinAlgError:
                jit *= 10.0
                if jit > MAX_JITTER * (1 + 1e-9):
                    raise np.linalg.LinAlgError(
                        f"K block (level {level}, partition {j}) is not positive definite "
                        f"after jitter {MAX_JITTER:g}"
                    )
        used[j] = jit
    return L, used


class BasisSystem:
    """Knot-level quantities of the MRA recursion for one ``(phi, nu)``.

    Attributes
    ----------
    K_unit : (n_blocks, r, r)
        Unit-variance prior covariances of the weight blocks, in column order.
    A : list of (J^m, m, r, r)
        ``A[m][j, k] = K_unit[anc_k(j)] @ b_k(S*_{m,j})'``, the memoized
        ancestor-chain products used to evaluate level-``m`` basis functions.
    """

    def __init__(self, tree: KnotTree, params: MaternParams, jitter: float = 1e-8):
        self.tree = tree
        self.params = params
        self.jitter = jitter
        phi, nu = params.phi, params.nu
        anc, cross, self_d = _knot_geometry(tree)

        # one Bessel call for every knot pair the recursion touches
        parts = [self_d[m] for m in range(tree.M + 1)] + [c for m in range(tree.M + 1) for c in cross[m]]
        flat = matern_corr(np.concatenate([p.ravel() for p in parts]), phi, nu)
        corr, pos = [], 0
        for p in parts:
            corr.append(flat[pos:pos + p.size].reshape(p.shape))
            pos += p.size
        c_self = corr[: tree.M + 1]
        c_cross, k = [], tree.M + 1
        for m in range(tree.M + 1):
            c_cross.append(corr[k:k + m])
            k += m

        K_lvl, Kinv_lvl, L_lvl, logdet_lvl, jit_lvl = [], [], [], [], []
        self.A, self.W = [], []
        r = tree.r
        eye = np.eye(r)
        for m in range(tree.M + 1):
            a = anc[m]
            n = tree.J**m
            W = np.empty((n, m, r, r))
            for l in range(m):
                val = c_cross[m][l]
                for kk in range(l):
                    val = val - W[:, kk] @ self.A[l][a[:, l], kk]
                W[:, l] = val
            v = c_self[m].copy()
            for kk in range(m):
                v -= W[:, kk] @ K_lvl[kk][a[:, kk]] @ np.swapaxes(W[:, kk], -1, -2)
            v = 0.5 * (v + np.swapaxes(v, -1, -2))
            Lc, used = _chol_with_jitter(v, jitter, m)
            Linv = np.linalg.solve(Lc, np.broadcast_to(eye, Lc.shape))
            K = np.swapaxes(Linv, -1, -2) @ Linv
            K = 0.5 * (K + np.swapaxes(K, -1, -2))
            K_lvl.append(K)
            Kinv_lvl.append(v + used[:, None, None] * eye)
            L_lvl.append(np.linalg.cholesky(K))
            logdet_lvl.append(-2.0 * np.log(np.diagonal(Lc, axis1=-2, axis2=-1)).sum(-1))
            jit_lvl.append(used)
            A = np.empty((n, m, r, r))
            for kk in range(m):
                A[:, kk] = K_lvl[kk][a[:, kk]] @ np.swapaxes(W[:, kk], -1, -2)
            self.A.append(A)
            self.W.append(W)
        self.K_unit = np.concatenate(K_lvl)
        self.Kinv_unit = np.concatenate(Kinv_lvl)
        self.chol_K_unit = np.concatenate(L_lvl)
        self.logdet_K_unit = np.concatenate(logdet_lvl)
        self.jitter_used = np.concatenate(jit_lvl)

    @property
    def n_basis(self) -> int:
        return self.tree.n_basis

    @property
    def K_blocks(self) -> np.ndarray:
        return self.params.sigma2 * self.K_unit

    def with_sigma2(self, sigma2: float) -> "BasisSystem":
        """Same recursion with a new marginal variance (no recomputation)."""
        new = object.__new__(BasisSystem)
        new.__dict__.update(self.__dict__)
        new.params = MaternParams(sigma2, self.params.phi, self.params.nu)
        return new

    def columns(self, level: int, j) -> np.ndarray:
        """Global column indices of partition ``j`` at ``level`` (last axis = knot)."""
        r = self.tree.r
        start = (self.tree.block_offset(level) + np.asarray(j)) * r
        return start[..., None] + np.arange(r)

    def level_values(self, dist, parts, plan=None):
        """Basis values per level given knot distances.

        ``dist[:, l, :]`` holds distances from each point to the knots of its
        level-``l`` partition ``parts[:, l]``; returns ``(n, M + 1, r)``.
        ``plan`` is an optional precomputed spline plan for ``dist``.
        """
        corr = _corr_with_plan(dist, plan, self.params.phi, self.params.nu)
        vals = np.empty_like(corr)
        for l in range(self.tree.M + 1):
            v = corr[:, l, :]
            if l:
                A_l = self.A[l][parts[:, l]]  # (n, l, r, r)
                for k in range(l):
                    v = v - np.einsum("nr,nrs->ns", vals[:, k, :], A_l[:, k])
            vals[:, l, :] = v
        return vals

    def basis_at(self, points) -> np.ndarray:
        """Dense ``(n, n_basis)`` matrix of basis functions at points."""
        ev = PointEvaluator(self.tree, points)
        return ev.dense(self)

    def covariance(self, s1, s2) -> np.ndarray:
        """Implied spatial covariance ``sum_m b_m(s1)' K_m b_m(s2)`` of the field."""
        b1 = self.basis_at(s1)
        b2 = self.basis_at(s2)
        return _quad_form(b1, self.K_blocks, b2, self.tree.r)


def _quad_form(b1, K_blocks, b2, r):
    n_blocks = K_blocks.shape[0]
    x1 = b1.reshape(len(b1), n_blocks, r)
    x2 = b2.reshape(len(b2), n_blocks, r)
    return np.einsum("abr,brs,cbs->ac", x1, K_blocks, x2)


def build_basis(tree: KnotTree, p: MaternParams, jitter: float = 1e-8) -> BasisSystem:
    return BasisSystem(tree, p, jitter)


class PointEvaluator:
    """Cached geometry (partition paths, knot distances) for a fixed point set."""

    def __init__(self, tree: KnotTree, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(tree.in_domain(pts)):
            raise ValueError("points outside the spatial domain")
        self.tree = tree
        self.points = pts
        finest = tree.locate(pts, tree.M)
        self.parts = np.stack([tree.ancestor(tree.M, finest, l) for l in range(tree.M + 1)], axis=1)
        self.dist = np.stack(
            [
                np.sqrt(((pts[:, None, :] - tree.knots[l][self.parts[:, l]]) ** 2).sum(-1))
                for l in range(tree.M + 1)
            ],
            axis=1,
        )
        r = tree.r
        self.cols = np.stack(
            [(tree.block_offset(l) + self.parts[:, l])[:, None] * r + np.arange(r) for l in range(tree.M + 1)],
            axis=1,
        )  # (n, M+1, r)
        self.plan = _LogGridPlan(self.dist) if self.dist.size >= _SPLINE_MIN_SIZE else None

    def values(self, sys: BasisSystem) -> np.ndarray:
        return sys.level_values(self.dist, self.parts, self.plan)

    def dense(self, sys: BasisSystem) -> np.ndarray:
        vals = self.values(sys)
        out = np.zeros((len(self.points), sys.n_basis))
        rows = np.repeat(np.arange(len(self.points)), vals.shape[1] * vals.shape[2])
        out[rows, self.cols.ravel()] = vals.ravel()
        return out


class ArealDesign:
    """Quadrature-averaged basis matrix for a fixed set of areal units.

    Geometry is computed once; :meth:`matrix` re-evaluates the basis for a
    new :class:`BasisSystem` (used on every covariance proposal).
    """

    def __init__(self, tree: KnotTree, quads):
        self.tree = tree
        self.area_ids = [qs.area_id for qs in quads]
        pts = np.vstack([qs.points for qs in quads])
        self.unit = np.repeat(np.arange(len(quads)), [len(qs.points) for qs in quads])
        self.weight = np.concatenate([np.asarray(qs.weights, dtype=np.float64) for qs in quads])
        self.points = PointEvaluator(tree, pts)

    def matrix(self, sys: BasisSystem) -> np.ndarray:
        vals = self.points.values(sys) * self.weight[:, None, None]
        p = sys.n_basis
        n_units = len(self.area_ids)
        flat = (self.unit[:, None, None] * p + self.points.cols).ravel()
        return np.bincount(flat, weights=vals.ravel(), minlength=n_units * p).reshape(n_units, p)


def areal_basis(sys: BasisSystem, quads) -> np.ndarray:
    """Rows of quadrature-averaged basis functions, one per areal unit."""
    return ArealDesign(sys.tree, quads).matrix(sys)


# ---------------------------------------------------------------------------
# AR(1) weights


@dataclass
class WeightChain:
    eta: np.ndarray  # (T, n_basis)
    alpha: float
    U_blocks: np.ndarray

    def __post_init__(self):
        if not (0 < self.alpha < 1):
            raise ValueError("alpha must lie in (0, 1)")


def _block_matvec(blocks, x, r):
    n_blocks = blocks.shape[0]
    return np.einsum("brs,...bs->...br", blocks, x.reshape(x.shape[:-1] + (n_blocks, r))).reshape(x.shape)


def sample_weights_prior(sys: BasisSystem, T: int, alpha: float, rng, n_chains: int | None = None) -> WeightChain:
    """Draw ``eta_1 ~ N(0, K)``, ``eta_t | eta_{t-1} ~ N(alpha eta_{t-1}, (1 - alpha^2) K)``.

    With ``n_chains`` the returned ``eta`` has shape ``(n_chains, T, n_basis)``.
    """
    if not (0 < alpha < 1):
        raise ValueError("alpha must lie in (0, 1)")
    L = math.sqrt(sys.params.sigma2) * sys.chol_K_unit
    p, r = sys.n_basis, sys.tree.r
    lead = () if n_chains is None else (n_chains,)
    z = rng.standard_normal(lead + (T, p))
    eta = np.empty_like(z)
    eta[..., 0, :] = _block_matvec(L, z[..., 0, :], r)
    s = math.sqrt(1.0 - alpha**2)
    for t in range(1, T):
        eta[..., t, :] = alpha * eta[..., t - 1, :] + s * _block_matvec(L, z[..., t, :], r)
    return WeightChain(eta, alpha, (1.0 - alpha**2) * sys.K_blocks)


def eval_field(sys: BasisSystem, chain: WeightChain, s, t: int):
    """``w_{t,M}(s) = sum_m b_m(s) eta_{t,m}`` at points ``s`` for time ``t`` (1-based)."""
    T = chain.eta.shape[-2]
    if not (1 <= t <= T):
        raise ValueError(f"t must lie in 1..{T}")
    pts = np.atleast_2d(np.asarray(s, dtype=np.float64))
    if not np.all(sys.tree.in_domain(pts)):
        raise ValueError("location outside the spatial domain")
    out = sys.basis_at(pts) @ chain.eta[..., t - 1, :].T
    return out


# ---------------------------------------------------------------------------
# basis matrix cache


def basis_cache_key(domain, M, J, r, seed, theta: MaternParams, q) -> str:
    payload = json.dumps(
        {"domain": [float(v) for v in domain], "M": M, "J": J, "r": r, "seed": seed, "q": q,
         "phi": float(theta.phi), "nu": float(theta.nu)},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def save_basis_matrix(directory, key: str, B: np.ndarray, area_ids) -> Path:
    path = Path(directory) / f"basis_{key}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, B=B, area_ids=np.asarray(area_ids, dtype=str))
    return path


def load_basis_matrix(directory, key: str):
    path = Path(directory) / f"basis_{key}.npz"
    if not path.exists():
        return None
    with np.load(path) as f:
        return f["B"], list(f["area_ids"])
