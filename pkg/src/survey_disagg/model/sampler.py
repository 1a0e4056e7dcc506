"""Posterior sampler for the probit change-of-support model.

Cells are annual tract values ``c = t * G + g`` with linear predictor

    lp_c = mu_t + B_g eta_t + xi_county(g) + eps_c,    pi_c = Phi(lp_c).

Each binomial working observation averages ``Phi`` over its cells. The
sampler augments it in two stages (multinomial allocation of trials to cells,
then truncated-normal latents per trial, kept as per-cell sums). Given those
sums every Gaussian block is conjugate. ``eps`` is integrated out when the
structured parts are drawn and sampled last, and ``(mu_t, eta_t)`` is drawn
jointly over all years through a block-tridiagonal Cholesky factor.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf, dpotri
from scipy.special import log_ndtr, logsumexp, ndtr, ndtri

from .. import kernels
from ..geometry import ArealHierarchy, quadrature_points
from ..stmra import NU_BOUNDS, ArealDesign, BasisSystem, MaternParams, build_basis, build_knot_tree
from .diagnostics import chain_ess, geweke
from .observations import CompiledObservations, ModelConfig, ModelState, Priors, compile_observations

logger = logging.getLogger(__name__)

MONITORED = ("tau2", "tauC2", "sigma2", "phi", "nu", "alpha")


class SamplerError(RuntimeError):
    """Non-finite sampler state; carries the iteration and a state dump."""

    def __init__(self, message, iteration=None, dump=None):
        super().__init__(message)
        self.iteration = iteration
        self.dump = dump


# ---------------------------------------------------------------------------
# data


@dataclass
class FitData:
    obs: CompiledObservations
    county_idx: np.ndarray  # (G,)
    county_ids: list
    design: ArealDesign

    @property
    def tract_ids(self) -> list:
        return self.obs.tract_ids

    @property
    def years(self) -> list:
        return self.obs.years

    @property
    def T(self) -> int:
        return len(self.obs.years)

    @property
    def G(self) -> int:
        return len(self.obs.tract_ids)


def domain_of(h: ArealHierarchy) -> tuple:
    boxes = np.array([u.bbox for u in h.tracts.values()])
    return float(boxes[:, 0].min()), float(boxes[:, 1].min()), float(boxes[:, 2].max()), float(boxes[:, 3].max())


def prepare_fit_data(observations, h: ArealHierarchy, cfg: ModelConfig, years=None, domain=None) -> FitData:
    """Compile observations and the areal design (quadrature, knot tree) for a fit."""
    tract_ids = sorted(h.tract_to_county)
    missing_geom = [t for t in tract_ids if t not in h.tracts]
    if missing_geom:
        raise ValueError(f"tracts without geometry: {missing_geom[:5]}")
    if years is None:
        years = sorted({y for o in observations for _, y, _ in o.cells})
        years = list(range(min(years), max(years) + 1))
    obs = compile_observations(observations, tract_ids, years)
    county_ids = sorted(set(h.tract_to_county.values()))
    c_index = {c: i for i, c in enumerate(county_ids)}
    county_idx = np.array([c_index[h.tract_to_county[t]] for t in tract_ids], dtype=np.int64)
    tree = build_knot_tree(domain or domain_of(h), cfg.M, cfg.J, cfg.r)
    quads = [quadrature_points(h.tracts[t], cfg.q, cfg.quad_seed) for t in tract_ids]
    return FitData(obs, county_idx, county_ids, ArealDesign(tree, quads))


# ---------------------------------------------------------------------------
# building blocks


def linear_predictor(state: ModelState, B: np.ndarray, county_idx: np.ndarray, include_eps: bool = True):
    """``(T, G)`` array of ``mu_t + B_g eta_t + xi_county(g) [+ eps_tg]``."""
    f = state.mu[:, None] + state.eta @ B.T + state.xi[county_idx][None, :]
    if include_eps:
        f = f + state.eps.reshape(f.shape)
    return f


def augment_latents(lp_flat, obs: CompiledObservations, rng, exact_max=kernels.DEFAULT_EXACT_MAX):
    """Allocate trials to cells, then draw per-cell sums of probit latents.

    Returns ``(n_pos, n_neg, latent_sum)`` per cell.
    """
    if not np.all(np.isfinite(lp_flat)):
        raise SamplerError("non-finite linear predictor in augmentation")
    n_cells = lp_flat.shape[0]
    n_pos = np.zeros(n_cells, dtype=np.int64)
    n_neg = np.zeros(n_cells, dtype=np.int64)
    for idx, cells, w in obs.groups:
        succ = obs.n_success[idx]
        fail = obs.n_trials[idx] - succ
        if cells.shape[1] == 1:
            np.add.at(n_pos, cells[:, 0], succ)
            np.add.at(n_neg, cells[:, 0], fail)
            continue
        lp = lp_flat[cells]
        logw = np.log(w)
        for counts, logp, target in ((succ, log_ndtr(lp), n_pos), (fail, log_ndtr(-lp), n_neg)):
            a = logw + logp
            prob = np.exp(a - logsumexp(a, axis=1, keepdims=True))
            prob /= prob.sum(axis=1, keepdims=True)
            alloc = rng.multinomial(counts, prob)
            target += np.bincount(cells.ravel(), weights=alloc.ravel(), minlength=n_cells).astype(np.int64)
    S = kernels.tn_sums(lp_flat, n_pos, n_neg, rng, exact_max=exact_max)
    return n_pos, n_neg, S


def collapsed_stats(n_trials, latent_sum, tau2):
    """Per-cell precision and precision-weighted mean with ``eps`` integrated out."""
    denom = 1.0 + n_trials * tau2
    return n_trials / denom, latent_sum / denom


def _block_sandwich(blocks, S):
    """``K S K`` for block-diagonal ``K`` given as ``(n_blocks, r, r)``."""
    nb, r, _ = blocks.shape
    p = nb * r
    left = np.matmul(blocks, S.reshape(nb, r, p)).reshape(p, p)
    # K is symmetric, so K S K = (K (K S)')'
    return np.matmul(blocks, left.T.reshape(nb, r, p)).reshape(p, p).T


def _block_matvec(blocks, x):
    nb, r, _ = blocks.shape
    return np.matmul(blocks, x.reshape(nb, r, 1)).ravel()


class JointPosterior:
    """Gaussian full conditional of ``x_t = (mu_t, eta_t)`` for all years.

    The precision is block tridiagonal in ``t``: data blocks ``X' P_t X``
    with ``X = [1, B]`` plus the stationary AR(1) prior precision, whose
    off-diagonal blocks ``-alpha / ((1 - alpha^2) sigma2) K_unit^{-1}`` are
    block diagonal. Exposes the collapsed log marginal likelihood of the
    data (up to terms free of ``B``, ``K`` and ``alpha``) and exact draws.
    """

    def __init__(self, B, sys: BasisSystem, alpha, prec, lin, priors: Priors):
        T, G = prec.shape
        p = B.shape[1]
        n = p + 1
        self.T, self.n = T, n
        X = np.empty((G, n))
        X[:, 0] = 1.0
        X[:, 1:] = B
        sigma2 = sys.params.sigma2
        Kb = sys.Kinv_unit / sigma2  # prior precision blocks of eta_t
        self.Kb = Kb
        a2 = alpha * alpha
        if T == 1:
            cdiag = np.array([1.0])
        else:
            cdiag = np.full(T, (1.0 + a2) / (1.0 - a2))
            cdiag[0] = cdiag[-1] = 1.0 / (1.0 - a2)
        self.c_off = -alpha / (1.0 - a2)
        Kdiag = np.zeros((p, p))
        r = sys.tree.r
        for b in range(Kb.shape[0]):
            Kdiag[b * r:(b + 1) * r, b * r:(b + 1) * r] = Kb[b]

        self.b = lin @ X  # (T, n)
        self.L = []
        logdet_post = 0.0
        for t in range(T):
            W = X * np.sqrt(prec[t])[:, None]
            D = W.T @ W
            D[0, 0] += 1.0 / priors.mu_var
            D[1:, 1:] += cdiag[t] * Kdiag
            if t > 0:
                # Schur complement: D_t - E S_{t-1}^{-1} E with E = c_off * Kdiag on the eta block
                Sinv, info = dpotri(self.L[-1], lower=1)
                if info != 0:
                    raise np.linalg.LinAlgError("joint precision inverse failed")
                # dpotri fills the lower triangle only; the upper one is zero
                Sinv = Sinv + Sinv.T
                Sinv.flat[:: n + 1] *= 0.5
                D[1:, 1:] -= self.c_off**2 * _block_sandwich(Kb, Sinv[1:, 1:])
            c, info = dpotrf(D, lower=1, clean=1, overwrite_a=1)
            if info != 0:
                raise np.linalg.LinAlgError(f"joint precision block {t} not positive definite")
            self.L.append(c)
            logdet_post += 2.0 * np.log(np.diagonal(c)).sum()
        self.logdet_post = logdet_post
        logdet_K = sys.logdet_K_unit.sum() + p * math.log(sigma2)
        self.logdet_prior = -T * logdet_K - p * (T - 1) * math.log(1.0 - a2) - T * math.log(priors.mu_var)
        self.v = self._forward(self.b)

    def _E(self, x):
        out = np.zeros_like(x)
        out[1:] = self.c_off * _block_matvec(self.Kb, x[1:])
        return out

    def _forward(self, b):
        v = np.empty_like(b)
        for t in range(self.T):
            rhs = b[t]
            if t > 0:
                y = solve_triangular(self.L[t - 1], v[t - 1], lower=True, trans=1, check_finite=False)
                rhs = rhs - self._E(y)
            v[t] = solve_triangular(self.L[t], rhs, lower=True, check_finite=False)
        return v

    def _backward(self, w):
        x = np.empty_like(w)
        for t in range(self.T - 1, -1, -1):
            rhs = w[t]
            if t < self.T - 1:
                rhs = rhs - solve_triangular(self.L[t], self._E(x[t + 1]), lower=True, check_finite=False)
            x[t] = solve_triangular(self.L[t], rhs, lower=True, trans=1, check_finite=False)
        return x

    def log_marginal(self) -> float:
        return 0.5 * (self.logdet_prior - self.logdet_post + float(np.sum(self.v**2)))

    def mean(self):
        return self._backward(self.v)

    def sample(self, rng):
        x = self._backward(self.v + rng.standard_normal(self.v.shape))
        return x[:, 0].copy(), x[:, 1:].copy()


def gibbs_eta(state, B, sys, prec, lin, priors, rng, county_idx):
    """Joint draw of ``(mu_t, eta_t)`` for all years from their full conditional."""
    resid_lin = lin - prec * state.xi[county_idx][None, :]
    post = JointPosterior(B, sys, state.alpha, prec, resid_lin, priors)
    return post.sample(rng)


def gibbs_mu(state, B, prec, lin, county_idx, priors, rng):
    """``mu_t`` given everything else (``eps`` integrated out)."""
    f = state.eta @ B.T + state.xi[county_idx][None, :]
    P = prec.sum(axis=1) + 1.0 / priors.mu_var
    m = (lin - prec * f).sum(axis=1) / P
    return m + rng.standard_normal(m.shape) / np.sqrt(P)


def gibbs_xi(state, B, prec, lin, county_idx, n_counties, rng):
    """County effects given everything else (``eps`` integrated out); prior draw for empty counties."""
    f = state.mu[:, None] + state.eta @ B.T
    r = (lin - prec * f).sum(axis=0)
    P_cell = prec.sum(axis=0)
    P = np.bincount(county_idx, weights=P_cell, minlength=n_counties) + 1.0 / state.tauC2
    h = np.bincount(county_idx, weights=r, minlength=n_counties)
    return h / P + rng.standard_normal(n_counties) / np.sqrt(P)


def center_xi_mu(state, priors, rng):
    """Draw a common shift ``c`` (``xi + c``, ``mu - c``) from its conditional."""
    K, T = state.xi.shape[0], state.mu.shape[0]
    P = K / state.tauC2 + T / priors.mu_var
    m = (-state.xi.sum() / state.tauC2 + state.mu.sum() / priors.mu_var) / P
    c = m + rng.standard_normal() / math.sqrt(P)
    return state.xi + c, state.mu - c


def gibbs_eps(f_flat, n_trials, latent_sum, tau2, rng):
    """Per-cell model error given the structured predictor and latent sums."""
    P = 1.0 / tau2 + n_trials
    m = (latent_sum - n_trials * f_flat) / P
    return m + rng.standard_normal(m.shape) / np.sqrt(P)


def _ig(rng, shape, rate):
    return rate / rng.gamma(shape)


def whitened_weights(eta, sys: BasisSystem):
    """``L_unit^{-1} eta_t`` per block, shape ``(T, n_blocks, r)``."""
    T = eta.shape[0]
    r = sys.tree.r
    e = eta.reshape(T, -1, r)
    L = sys.chol_K_unit
    return np.linalg.solve(L[None], e[..., None])[..., 0]


def ar_sums(e):
    """Sufficient statistics of the AR(1) prior in whitened coordinates."""
    first = float(np.sum(e[0] ** 2))
    if e.shape[0] == 1:
        return first, 0.0, 0.0, 0.0
    s00 = float(np.sum(e[:-1] ** 2))
    s11 = float(np.sum(e[1:] ** 2))
    s01 = float(np.sum(e[1:] * e[:-1]))
    return first, s00, s11, s01


def ar_quadratic(sums, alpha):
    first, s00, s11, s01 = sums
    return first + (s11 - 2.0 * alpha * s01 + alpha * alpha * s00) / (1.0 - alpha * alpha)


def gibbs_variances(state, sys, priors, rng, fixed=()):
    """Inverse-gamma updates of ``tau2``, ``tauC2`` and ``sigma2``."""
    tau2, tauC2, sigma2 = state.tau2, state.tauC2, state.matern.sigma2
    if "tau2" not in fixed:
        a, b = priors.ig_tau2
        tau2 = _ig(rng, a + 0.5 * state.eps.size, b + 0.5 * float(state.eps @ state.eps))
    if "tauC2" not in fixed:
        a, b = priors.ig_tauC2
        tauC2 = _ig(rng, a + 0.5 * state.xi.size, b + 0.5 * float(state.xi @ state.xi))
    if "sigma2" not in fixed:
        a, b = priors.ig_sigma2
        Q = ar_quadratic(ar_sums(whitened_weights(state.eta, sys)), state.alpha)
        sigma2 = _ig(rng, a + 0.5 * state.eta.size, b + 0.5 * Q)
    return tau2, tauC2, sigma2


def _logit(x):
    return math.log(x) - math.log1p(-x)


def _expit(x):
    return 1.0 / (1.0 + math.exp(-x))


def alpha_log_target(alpha, sums, sigma2, p, T):
    """Log AR(1) prior density of the weights as a function of ``alpha`` (uniform prior)."""
    if not (0.0 < alpha < 1.0):
        return -math.inf
    return -0.5 * p * (T - 1) * math.log1p(-alpha * alpha) - 0.5 * ar_quadratic(sums, alpha) / sigma2


def mh_alpha(alpha, sums, sigma2, p, T, scale, rng):
    """Logit random-walk Metropolis step; returns ``(alpha, accept_prob)``."""
    u = _logit(alpha)
    u_new = u + scale * rng.standard_normal()
    a_new = _expit(u_new)
    if not (0.0 < a_new < 1.0):
        return alpha, 0.0
    # Jacobian of the logit map: alpha (1 - alpha)
    log_r = (
        alpha_log_target(a_new, sums, sigma2, p, T)
        + math.log(a_new * (1.0 - a_new))
        - alpha_log_target(alpha, sums, sigma2, p, T)
        - math.log(alpha * (1.0 - alpha))
    )
    acc = 1.0 if log_r >= 0 else math.exp(log_r)
    if rng.random() < acc:
        return a_new, acc
    return alpha, acc


def _cov_to_unconstrained(phi, nu):
    lo, hi = NU_BOUNDS
    return np.array([math.log(phi), _logit((nu - lo) / (hi - lo))])


def _cov_from_unconstrained(u):
    lo, hi = NU_BOUNDS
    return math.exp(u[0]), lo + (hi - lo) * _expit(u[1])


def cov_log_prior(phi, nu, priors: Priors) -> float:
    """Gamma prior on ``phi``, uniform on ``nu``, plus the log/logit Jacobians."""
    a, b = priors.phi_gamma
    lo, hi = priors.nu_uniform
    if not (lo < nu < hi) or not (NU_BOUNDS[0] < nu < NU_BOUNDS[1]):
        return -math.inf
    return a * math.log(phi) - b * phi + math.log((nu - NU_BOUNDS[0]) * (NU_BOUNDS[1] - nu))


@dataclass
class _Adapter:
    """Robbins-Monro scale adaptation with an empirical proposal covariance."""

    scale: float
    target: float
    chol: np.ndarray
    n: int = 0
    history: list = field(default_factory=list)

    def propose(self, u, rng):
        return u + self.scale * (self.chol @ rng.standard_normal(len(u)))

    def update(self, accept_prob, u, adapt):
        if not adapt:
            return
        self.n += 1
        self.scale *= math.exp((accept_prob - self.target) / self.n**0.6)
        self.scale = min(max(self.scale, 1e-4), 50.0)
        self.history.append(np.array(u, dtype=float))
        if len(self.history) >= 100 and len(self.history) % 50 == 0:
            H = np.array(self.history[len(self.history) // 2:])
            C = np.atleast_2d(np.cov(H.T)) + 1e-6 * np.eye(H.shape[1])
            try:
                self.chol = np.linalg.cholesky(C / np.sqrt(np.mean(np.diag(C))))
            except np.linalg.LinAlgError:
                pass


def mh_covariance(phi, nu, sigma2, current, build, log_target, adapter, rng, priors):
    """Collapsed Metropolis step for ``(phi, nu)``.

    ``current`` is ``(sys, B, posterior)`` at the current values; ``build``
    maps a :class:`MaternParams` to the same triple and ``log_target`` maps a
    posterior to its collapsed log marginal. Returns the accepted triple,
    the new ``(phi, nu)`` and the acceptance probability.
    """
    u = _cov_to_unconstrained(phi, nu)
    u_new = adapter.propose(u, rng)
    phi_new, nu_new = _cov_from_unconstrained(u_new)
    lp_new_prior = cov_log_prior(phi_new, nu_new, priors)
    if not math.isfinite(lp_new_prior) or not (NU_BOUNDS[0] < nu_new < NU_BOUNDS[1]):
        return current, (phi, nu), 0.0
    try:
        proposal = build(MaternParams(sigma2, phi_new, nu_new))
    except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        logger.info("covariance proposal phi=%.4g nu=%.4g rejected: %s", phi_new, nu_new, exc)
        return current, (phi, nu), 0.0
    log_r = (log_target(proposal[2]) + lp_new_prior) - (log_target(current[2]) + cov_log_prior(phi, nu, priors))
    acc = 1.0 if log_r >= 0 else math.exp(log_r)
    if rng.random() < acc:
        return proposal, (phi_new, nu_new), acc
    return current, (phi, nu), acc


# ---------------------------------------------------------------------------
# posterior draws


@dataclass
class PosteriorDraws:
    pi: np.ndarray  # (n_draws, T, G)
    mu: np.ndarray  # (n_draws, T)
    params: dict  # name -> (n_draws,)
    tract_ids: list
    years: list
    chain_id: np.ndarray
    acceptance: dict
    seed: int
    fingerprint: str
    geweke_z: dict = field(default_factory=dict)
    ess: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any((self.pi < 0.0) | (self.pi > 1.0)):
            raise ValueError("stored proportions must lie in [0, 1]")

    @property
    def n_draws(self) -> int:
        return self.pi.shape[0]

    def cell(self, tract_id, year) -> np.ndarray:
        try:
            g = self.tract_ids.index(tract_id)
            t = self.years.index(int(year))
        except ValueError:
            raise KeyError((tract_id, year)) from None
        return self.pi[:, t, g]

    def has_cell(self, tract_id, year) -> bool:
        return tract_id in self.tract_ids and int(year) in self.years

    def monitored(self) -> dict:
        out = {k: v for k, v in self.params.items()}
        for t, y in enumerate(self.years):
            out[f"mu[{y}]"] = self.mu[:, t]
        return out

    def compute_diagnostics(self):
        """Per-parameter chain ESS (summed over chains) and Geweke z (first chain)."""
        self.ess, self.geweke_z = {}, {}
        chains = np.unique(self.chain_id)
        for name, x in self.monitored().items():
            total = 0.0
            for c in chains:
                xc = x[self.chain_id == c]
                total += chain_ess(xc)
            self.ess[name] = total
            x0 = x[self.chain_id == chains[0]]
            try:
                self.geweke_z[name] = geweke(x0) if len(x0) >= 100 else float("nan")
            except ValueError:
                self.geweke_z[name] = float("nan")
        return self

    def save(self, path):
        np.savez_compressed(
            path,
            pi=self.pi,
            mu=self.mu,
            chain_id=self.chain_id,
            tract_ids=np.asarray(self.tract_ids, dtype=str),
            years=np.asarray(self.years),
            seed=self.seed,
            fingerprint=self.fingerprint,
            **{f"param_{k}": v for k, v in self.params.items()},
            **{f"accept_{k}": np.asarray(v) for k, v in self.acceptance.items()},
        )

    @classmethod
    def load(cls, path) -> "PosteriorDraws":
        with np.load(path, allow_pickle=False) as f:
            params = {k[6:]: f[k] for k in f.files if k.startswith("param_")}
            acc = {k[7:]: float(f[k]) for k in f.files if k.startswith("accept_")}
            d = cls(
                pi=f["pi"],
                mu=f["mu"],
                params=params,
                tract_ids=[str(v) for v in f["tract_ids"]],
                years=[int(v) for v in f["years"]],
                chain_id=f["chain_id"],
                acceptance=acc,
                seed=int(f["seed"]),
                fingerprint=str(f["fingerprint"]),
            )
        return d

    @classmethod
    def concat(cls, parts) -> "PosteriorDraws":
        first = parts[0]
        acc = {k: float(np.mean([p.acceptance[k] for p in parts])) for k in first.acceptance}
        return cls(
            pi=np.concatenate([p.pi for p in parts]),
            mu=np.concatenate([p.mu for p in parts]),
            params={k: np.concatenate([p.params[k] for p in parts]) for k in first.params},
            tract_ids=first.tract_ids,
            years=first.years,
            chain_id=np.concatenate([p.chain_id for p in parts]),
            acceptance=acc,
            seed=first.seed,
            fingerprint=first.fingerprint,
        )


# ---------------------------------------------------------------------------
# driver


def initial_state(data: FitData, cfg: ModelConfig, rng) -> ModelState:
    init = dict(cfg.init)
    pooled = (data.obs.n_success.sum() + 0.5) / (data.obs.n_trials.sum() + 1.0)
    T, G = data.T, data.G
    p = data.design.tree.n_basis
    mu0 = float(init.get("mu", ndtri(pooled)))
    x0, y0, x1, y1 = data.design.tree.domain
    phi0 = float(init.get("phi", 0.1 * math.hypot(x1 - x0, y1 - y0)))
    return ModelState(
        mu=np.full(T, mu0),
        eta=np.zeros((T, p)),
        xi=np.zeros(len(data.county_ids)),
        eps=np.zeros(T * G),
        tau2=float(init.get("tau2", 0.05)),
        tauC2=float(init.get("tauC2", 0.05)),
        matern=MaternParams(float(init.get("sigma2", 1.0)), phi0, float(init.get("nu", 1.0))),
        alpha=float(init.get("alpha", 0.5)),
    )


def run_chain(cfg: ModelConfig, data: FitData, seed=None, chain: int = 0, progress=None) -> PosteriorDraws:
    """Run one chain: burn-in with proposal adaptation, then thinned sampling."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([int(seed), int(chain)])
    priors = cfg.priors
    fixed = set(cfg.fixed)
    state = initial_state(data, cfg, rng)
    T, G = data.T, data.G
    obs = data.obs
    county_idx = data.county_idx
    K = len(data.county_ids)

    def build(params):
        sys = build_basis(data.design.tree, params, cfg.jitter)
        return sys, data.design.matrix(sys)

    sys, B = build(state.matern)
    p = B.shape[1]
    cov_adapt = _Adapter(scale=0.5, target=cfg.target_accept, chol=np.diag([0.5, 1.0]))
    alpha_scale = 0.5
    n_alpha_adapt = 0
    acc_sum = {"cov": 0.0, "alpha": 0.0}
    acc_n = {"cov": 0, "alpha": 0}

    n_keep = len(range(cfg.burnin, cfg.iters, cfg.thin))
    pi_store = np.empty((n_keep, T, G))
    mu_store = np.empty((n_keep, T))
    par_store = {k: np.empty(n_keep) for k in MONITORED}
    k_out = 0

    for it in range(cfg.iters):
        adapt = it < cfg.burnin
        lp = linear_predictor(state, B, county_idx)
        state.n_pos, state.n_neg, state.latent_sum = augment_latents(lp.ravel(), obs, rng, cfg.exact_max)
        n_c = (state.n_pos + state.n_neg).astype(np.float64)
        prec, lin = collapsed_stats(n_c, state.latent_sum, state.tau2)
        prec, lin = prec.reshape(T, G), lin.reshape(T, G)
        resid_lin = lin - prec * state.xi[county_idx][None, :]

        def posterior(s, b):
            return JointPosterior(b, s, state.alpha, prec, resid_lin, priors)

        try:
            post = posterior(sys, B)
        except np.linalg.LinAlgError as exc:
            raise SamplerError(str(exc), it, state.dump()) from None

        if not ({"phi", "nu"} <= fixed) and it % cfg.cov_every == 0:
            def build_full(params):
                s, b = build(params)
                return s, b, posterior(s, b)

            (sys, B, post), (phi, nu), acc = mh_covariance(
                state.matern.phi, state.matern.nu, state.matern.sigma2,
                (sys, B, post), build_full, lambda q: q.log_marginal(), cov_adapt, rng, priors,
            )
            state.matern = MaternParams(state.matern.sigma2, phi, nu)
            cov_adapt.update(acc, _cov_to_unconstrained(phi, nu), adapt)
            if not adapt:
                acc_sum["cov"] += acc
                acc_n["cov"] += 1

        state.mu, state.eta = post.sample(rng)
        state.xi = gibbs_xi(state, B, prec, lin, county_idx, K, rng)
        state.xi, state.mu = center_xi_mu(state, priors, rng)
        f = linear_predictor(state, B, county_idx, include_eps=False).ravel()
        state.eps = gibbs_eps(f, n_c, state.latent_sum, state.tau2, rng)

        tau2, tauC2, sigma2 = gibbs_variances(state, sys, priors, rng, fixed)
        state.tau2, state.tauC2 = tau2, tauC2
        if sigma2 != state.matern.sigma2:
            state.matern = MaternParams(sigma2, state.matern.phi, state.matern.nu)
            sys = sys.with_sigma2(sigma2)
        if "alpha" not in fixed and T > 1:
            sums = ar_sums(whitened_weights(state.eta, sys))
            for _ in range(cfg.alpha_steps):
                state.alpha, acc = mh_alpha(state.alpha, sums, sigma2, p, T, alpha_scale, rng)
                if adapt:
                    n_alpha_adapt += 1
                    alpha_scale *= math.exp((acc - cfg.target_accept) / n_alpha_adapt**0.6)
                    alpha_scale = min(max(alpha_scale, 1e-3), 20.0)
                else:
                    acc_sum["alpha"] += acc
                    acc_n["alpha"] += 1
        elif "alpha" not in fixed:
            # no temporal information: draw from the uniform prior
            state.alpha = float(rng.uniform(1e-6, 1.0 - 1e-6))

        if not state.check_finite():
            raise SamplerError("non-finite sampler state", it, state.dump())
        if it >= cfg.burnin and (it - cfg.burnin) % cfg.thin == 0:
            lp = linear_predictor(state, B, county_idx)
            pi_store[k_out] = ndtr(lp)
            mu_store[k_out] = state.mu
            for name, val in (
                ("tau2", state.tau2), ("tauC2", state.tauC2), ("sigma2", state.matern.sigma2),
                ("phi", state.matern.phi), ("nu", state.matern.nu), ("alpha", state.alpha),
            ):
                par_store[name][k_out] = val
            k_out += 1
        if progress is not None:
            progress(it)

    acceptance = {k: (acc_sum[k] / acc_n[k] if acc_n[k] else float("nan")) for k in acc_sum}
    return PosteriorDraws(
        pi=pi_store,
        mu=mu_store,
        params=par_store,
        tract_ids=list(data.tract_ids),
        years=list(data.years),
        chain_id=np.full(n_keep, chain, dtype=np.int64),
        acceptance=acceptance,
        seed=int(seed),
        fingerprint=cfg.fingerprint(),
    )


def run_chains(cfg: ModelConfig, data: FitData, seed=None) -> PosteriorDraws:
    """Run ``cfg.chains`` chains with distinct seeds and pool them."""
    seed = cfg.seed if seed is None else seed
    parts = [run_chain(cfg, data, seed, c) for c in range(cfg.chains)]
    return PosteriorDraws.concat(parts).compute_diagnostics()
