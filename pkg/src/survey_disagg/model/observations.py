"""Working observations, priors, configuration and sampler state."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..design_effect import DEFAULT_EPS, EffectiveCounts, effective_counts
from ..geometry import ArealHierarchy, population_weights
from ..stmra import NU_BOUNDS, MaternParams

KINDS = ("tract", "puma")


@dataclass(frozen=True)
class ModelObservation:
    """One binomial working observation on an average of annual tract cells.

    ``kind`` is ``"tract"`` or ``"puma"``; ``cells`` holds
    ``(tract_id, year, weight)`` triples whose weights sum to one.
    """

    kind: str
    area_id: str
    end_year: int
    period_len: int
    counts: EffectiveCounts
    cells: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown observation kind {self.kind!r}")
        total = sum(w for _, _, w in self.cells)
        if not self.cells or abs(total - 1.0) > 1e-9:
            raise ValueError(f"{self.area_id}/{self.end_year}: cell weights sum to {total}, not 1")


def assemble_observations(
    estimates,
    h: ArealHierarchy,
    eps: float = DEFAULT_EPS,
    years=None,
    counts: str = "effective",
) -> list:
    """Attach cells and working counts to tract and PUMA estimates.

    An ``l``-year record ending in ``t`` covers years ``t - l + 1 .. t``; each
    year gets weight ``1/l``, split across a PUMA's tracts by population share.
    ``counts`` is ``"effective"`` (design-effect adjusted) or ``"raw"``.
    """
    if counts not in ("effective", "raw"):
        raise ValueError(f"unknown counts mode {counts!r}")
    if years is None:
        years = h.years()
    window = set(int(y) for y in years)
    pumas = set(h.tract_to_puma.values()) | set(h.pumas)
    out = []
    for est in estimates:
        yrs = list(range(est.end_year - est.period_len + 1, est.end_year + 1))
        missing = [y for y in yrs if y not in window]
        if missing:
            raise ValueError(f"{est.area_id}/{est.end_year}: years {missing} outside the study window")
        if est.area_id in h.tract_to_puma:
            kind = "tract"
            cells = tuple((est.area_id, y, 1.0 / est.period_len) for y in yrs)
        elif est.area_id in pumas:
            kind = "puma"
            cells = tuple(
                (t, y, w / est.period_len)
                for y in yrs
                for t, w in population_weights(h, est.area_id, y).items()
            )
        else:
            raise ValueError(f"estimate references unknown area {est.area_id!r}")
        if counts == "effective":
            ec = effective_counts(est, eps)
        else:
            from ..baselines import raw_counts

            m, q = raw_counts(est)
            ec = EffectiveCounts(m, q, False)
        out.append(ModelObservation(kind, est.area_id, est.end_year, est.period_len, ec, cells))
    return out


@dataclass
class CompiledObservations:
    """Observations flattened into arrays over cells ``c = t * G + g``."""

    tract_ids: list
    years: list
    n_trials: np.ndarray
    n_success: np.ndarray
    groups: list  # per distinct cell count k: (obs index, (N, k) cells, (N, k) weights)

    @property
    def n_cells(self) -> int:
        return len(self.tract_ids) * len(self.years)


def compile_observations(obs, tract_ids, years) -> CompiledObservations:
    g_index = {t: i for i, t in enumerate(tract_ids)}
    t_index = {int(y): i for i, y in enumerate(years)}
    G = len(tract_ids)
    n = np.array([o.counts.ess for o in obs], dtype=np.int64)
    y = np.array([o.counts.enc for o in obs], dtype=np.int64)
    by_k: dict = {}
    for i, o in enumerate(obs):
        try:
            cells = [t_index[int(yr)] * G + g_index[t] for t, yr, _ in o.cells]
        except KeyError as exc:
            raise ValueError(f"{o.area_id}/{o.end_year}: cell {exc} not in the model grid") from None
        by_k.setdefault(len(cells), []).append((i, cells, [w for _, _, w in o.cells]))
    groups = []
    for k in sorted(by_k):
        rows = by_k[k]
        groups.append(
            (
                np.array([r[0] for r in rows], dtype=np.int64),
                np.array([r[1] for r in rows], dtype=np.int64),
                np.array([r[2] for r in rows], dtype=np.float64),
            )
        )
    return CompiledObservations(list(tract_ids), [int(v) for v in years], n, y, groups)


@dataclass(frozen=True)
class Priors:
    ig_tau2: tuple = (2.0, 1.0)
    ig_tauC2: tuple = (2.0, 1.0)
    ig_sigma2: tuple = (2.0, 1.0)
    phi_gamma: tuple = (1.0, 1.0)  # shape, rate
    nu_uniform: tuple = (0.0, 2.0)
    alpha_uniform: tuple = (0.0, 1.0)
    mu_var: float = 1e6  # stands in for the flat prior on each mu_t

    def __post_init__(self):
        for name in ("ig_tau2", "ig_tauC2", "ig_sigma2", "phi_gamma"):
            a, b = getattr(self, name)
            if not (a > 0 and b > 0):
                raise ValueError(f"{name}: shape and rate must be positive")
        if not self.mu_var > 0:
            raise ValueError("mu_var must be positive")


FIXABLE = ("tau2", "tauC2", "sigma2", "phi", "nu", "alpha")


@dataclass
class ModelConfig:
    M: int = 2
    J: int = 4
    r: int = 9
    q: int = 16
    eps: float = DEFAULT_EPS
    jitter: float = 1e-8
    iters: int = 10_000
    burnin: int = 2_000
    thin: int = 5
    seed: int = 0
    chains: int = 1
    quad_seed: int = 0
    exact_max: int = 64
    cov_every: int = 1
    alpha_steps: int = 3
    target_accept: float = 0.3
    ess_floor: float = 1000.0
    fixed: tuple = ()
    init: dict = field(default_factory=dict)
    priors: Priors = field(default_factory=Priors)

    def __post_init__(self):
        if isinstance(self.priors, dict):
            self.priors = Priors(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.priors.items()})
        self.fixed = tuple(self.fixed)
        bad = [f for f in self.fixed if f not in FIXABLE]
        if bad:
            raise ValueError(f"cannot fix unknown parameters {bad}")
        if self.iters < 1 or self.burnin < 0 or self.burnin >= self.iters:
            raise ValueError("need iters >= 1 and 0 <= burnin < iters")
        if self.thin < 1 or self.chains < 1 or self.q < 1:
            raise ValueError("thin, chains and q must be >= 1")
        if self.cov_every < 1 or self.alpha_steps < 0:
            raise ValueError("cov_every must be >= 1 and alpha_steps >= 0")

    def fingerprint(self) -> str:
        d = asdict(self)
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class ModelState:
    """Latent quantities of one sampler iteration."""

    mu: np.ndarray  # (T,)
    eta: np.ndarray  # (T, p)
    xi: np.ndarray  # (n_counties,)
    eps: np.ndarray  # (T * G,)
    tau2: float
    tauC2: float
    matern: MaternParams
    alpha: float
    n_pos: Optional[np.ndarray] = None  # per-cell allocated successes
    n_neg: Optional[np.ndarray] = None
    latent_sum: Optional[np.ndarray] = None  # per-cell sum of probit latents

    def check_finite(self) -> bool:
        scalars = [self.tau2, self.tauC2, self.matern.sigma2, self.matern.phi, self.matern.nu, self.alpha]
        return all(math.isfinite(v) for v in scalars) and all(
            np.all(np.isfinite(a)) for a in (self.mu, self.eta, self.xi, self.eps)
        )

    def dump(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "xi": self.xi.tolist(),
            "tau2": self.tau2,
            "tauC2": self.tauC2,
            "sigma2": self.matern.sigma2,
            "phi": self.matern.phi,
            "nu": self.matern.nu,
            "alpha": self.alpha,
            "eta_finite": bool(np.all(np.isfinite(self.eta))),
            "eps_finite": bool(np.all(np.isfinite(self.eps))),
        }


def nu_in_range(nu: float) -> bool:
    return NU_BOUNDS[0] < nu < NU_BOUNDS[1]
