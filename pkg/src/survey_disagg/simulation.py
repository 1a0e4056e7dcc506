"""Synthetic truths and pseudo-survey estimates on a 10 x 10 grid, and study pipelines.

Units are unit squares on ``[0, 10]^2`` grouped into four 5 x 5 regions that
play the role of PUMAs. Each region is further cut into four counties
(3 x 3, 3 x 2, 2 x 3 and 2 x 2 blocks) for the county random effects.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .baselines import fit_model
from .design_effect import DesignEffectSpec, SurveyEstimate, logit_noise_variance
from .geometry import ArealHierarchy, rectangle_unit
from .metrics import coverage, error_metrics, joint_band, pointwise_ci
from .model.observations import ModelConfig
from .stmra import MaternParams, matern_cov

logger = logging.getLogger(__name__)

GRID = 10
REGION = 5
COUNTY_CUTS = (0, 3, 5)  # county boundaries within a region, per axis
POPULATION = 1000.0
TABLE_COLUMNS = ("t", "cov95_pt", "cov50_pt", "cov95_joint", "cov50_joint", "mse", "mae", "msre", "mare")


@dataclass
class SimulationConfig:
    setting: int = 1
    study: int = 1
    T: int = 10
    first_year: int = 1
    replicates: int = 30
    gp: tuple = (1.0, 0.5, 1.0)
    trend: tuple = (-1.0, 0.2)
    noise_sd: float = 0.2
    v: float = 0.15**2
    d: float = 2.0
    m: int = 100
    cycle_settings: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.setting not in (1, 2, 3, 4):
            raise ValueError(f"setting must be 1, 2, 3 or 4, got {self.setting}")
        if self.study not in (1, 2):
            raise ValueError(f"study must be 1 or 2, got {self.study}")
        if self.T < 5:
            raise ValueError("T must be >= 5 so that 5-year estimates exist")
        if self.study == 2:
            DesignEffectSpec(self.d, self.m)
        if self.v < 0 or self.noise_sd < 0:
            raise ValueError("variances must be nonnegative")
        self.gp = tuple(self.gp)
        self.trend = tuple(self.trend)

    @property
    def years(self) -> list:
        return list(range(self.first_year, self.first_year + self.T))

    def setting_for(self, replicate: int) -> int:
        return (replicate % 4) + 1 if self.cycle_settings else self.setting


def tract_id(row: int, col: int) -> str:
    return f"T{row:02d}{col:02d}"


def region_of(row: int, col: int) -> int:
    return (row // REGION) * (GRID // REGION) + col // REGION


def county_of(row: int, col: int) -> str:
    def block(k):
        return 0 if k % REGION < COUNTY_CUTS[1] else 1

    return f"C{region_of(row, col)}{block(row)}{block(col)}"


def grid_hierarchy(years, population=POPULATION) -> ArealHierarchy:
    """Unit squares (row ``i`` spans ``y in [i, i+1]``), regions as PUMAs, nested counties."""
    h = ArealHierarchy()
    for i in range(GRID):
        for j in range(GRID):
            tid = tract_id(i, j)
            h.tracts[tid] = rectangle_unit(tid, j, i, j + 1, i + 1)
            h.tract_to_puma[tid] = f"R{region_of(i, j)}"
            h.tract_to_county[tid] = county_of(i, j)
            for y in years:
                h.populations[(tid, y)] = population
    for r in range(4):
        ri, rj = divmod(r, GRID // REGION)
        pid = f"R{r}"
        h.pumas[pid] = rectangle_unit(pid, rj * REGION, ri * REGION, (rj + 1) * REGION, (ri + 1) * REGION, "puma")
        for y in years:
            h.populations[(pid, y)] = population * REGION * REGION
    return h


def tract_order() -> list:
    return [tract_id(i, j) for i in range(GRID) for j in range(GRID)]


def centroids() -> np.ndarray:
    return np.array([[j + 0.5, i + 0.5] for i in range(GRID) for j in range(GRID)])


@lru_cache(maxsize=8)
def _gp_factor(gp: tuple) -> np.ndarray:
    """Cholesky factor of the Matérn covariance between unit centroids."""
    c = centroids()
    D = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    S = matern_cov(D, MaternParams(*gp))
    L = np.linalg.cholesky(S + 1e-10 * np.eye(len(c)))
    L.setflags(write=False)
    return L


@dataclass
class TrueField:
    pi: np.ndarray  # (T, 100) in tract_order()
    x: np.ndarray
    lam: np.ndarray
    setting: int


def gen_true_proportions(cfg: SimulationConfig, rng, setting=None) -> TrueField:
    """Annual true proportions for one replicate, shape ``(T, 100)``."""
    setting = cfg.setting if setting is None else setting
    n = GRID * GRID
    x = rng.standard_normal(n)
    lam = np.zeros(n)
    if setting in (2, 4):
        lam = _gp_factor(tuple(cfg.gp)) @ rng.standard_normal(n)
    t = np.arange(1, cfg.T + 1, dtype=np.float64)
    trend = cfg.trend[0] + cfg.trend[1] * t if setting in (3, 4) else np.zeros(cfg.T)
    e = cfg.noise_sd * rng.standard_normal((cfg.T, n))
    pi = expit(x[None, :] + lam[None, :] + trend[:, None] + e)
    return TrueField(pi, x, lam, setting)


@dataclass
class ObservedData:
    z1: np.ndarray  # (T, 100) annual tract values (not released to the model)
    z5: np.ndarray  # (T, 100), NaN for t < 5
    zreg: np.ndarray  # (T, 4)
    var5: np.ndarray  # pseudo design variances of z5
    varreg: np.ndarray
    m5: int
    mreg: int


def noise_variance(cfg: SimulationConfig, pi):
    if cfg.study == 1:
        return np.full_like(pi, cfg.v)
    return logit_noise_variance(pi, DesignEffectSpec(cfg.d, cfg.m))


def gen_observed(cfg: SimulationConfig, truth: TrueField, rng) -> ObservedData:
    """Logit-scale noisy annual values, their 5-year means and regional 1-year means.

    Pseudo design variances use the delta-method variance of each annual value,
    ``(pi (1 - pi))^2 v``, propagated through the means as if independent.
    """
    pi = truth.pi
    v = noise_variance(cfg, pi)
    z1 = expit(logit(pi) + np.sqrt(v) * rng.standard_normal(pi.shape))
    delta = (pi * (1.0 - pi)) ** 2 * v
    T = cfg.T
    z5 = np.full_like(z1, np.nan)
    var5 = np.full_like(z1, np.nan)
    for t in range(4, T):
        z5[t] = z1[t - 4:t + 1].mean(axis=0)
        var5[t] = delta[t - 4:t + 1].sum(axis=0) / 25.0
    regions = np.array([region_of(i, j) for i in range(GRID) for j in range(GRID)])
    zreg = np.stack([z1[:, regions == r].mean(axis=1) for r in range(4)], axis=1)
    varreg = np.stack([delta[:, regions == r].sum(axis=1) / 625.0 for r in range(4)], axis=1)
    return ObservedData(z1, z5, zreg, var5, varreg, m5=5 * cfg.m, mreg=REGION * REGION * cfg.m)


def to_estimates(cfg: SimulationConfig, obs: ObservedData) -> list:
    """Tract 5-year and region 1-year records as :class:`SurveyEstimate` objects."""
    years = cfg.years
    ids = tract_order()
    out = []
    for t in range(4, cfg.T):
        for g, tid in enumerate(ids):
            out.append(
                SurveyEstimate(tid, 5, years[t], float(obs.z5[t, g]), float(np.sqrt(obs.var5[t, g])), obs.m5)
            )
    for t in range(cfg.T):
        for r in range(4):
            out.append(
                SurveyEstimate(f"R{r}", 1, years[t], float(obs.zreg[t, r]), float(np.sqrt(obs.varreg[t, r])), obs.mreg)
            )
    return out


def score_replicate(draws, truth: TrueField) -> list:
    """Per-year coverage and error rows for one fitted replicate."""
    ids = tract_order()
    cols = [draws.tract_ids.index(t) for t in ids]
    pi = draws.pi[:, :, cols]  # (n, T, 100)
    rows = []
    for t in range(pi.shape[1]):
        d = pi[:, t, :]
        tru = truth.pi[t]
        est = d.mean(axis=0)
        em = error_metrics(est, tru)
        lo95, hi95 = pointwise_ci(d, 0.95)
        lo50, hi50 = pointwise_ci(d, 0.50)
        jl95, jh95 = joint_band(d, 0.95)
        jl50, jh50 = joint_band(d, 0.50)
        rows.append(
            {
                "t": t + 1,
                "cov95_pt": coverage(lo95, hi95, tru),
                "cov50_pt": coverage(lo50, hi50, tru),
                "cov95_joint": float(np.all((tru >= jl95) & (tru <= jh95))),
                "cov50_joint": float(np.all((tru >= jl50) & (tru <= jh50))),
                "mse": em.mse,
                "mae": em.mae,
                "msre": em.msre,
                "mare": em.mare,
            }
        )
    return rows


@dataclass
class StudyResult:
    model: str
    table: list  # per-t rows averaged over replicates
    per_replicate: list
    failed: int = 0
    settings: list = field(default_factory=list)

    def overall(self) -> dict:
        keys = TABLE_COLUMNS[1:]
        return {k: float(np.mean([r[k] for r in self.table])) for k in keys}

    def write_csv(self, path, header: str = "") -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
            w.writeheader()
            for row in self.table:
                w.writerow({k: (f"{row[k]:.6g}" if k != "t" else row[k]) for k in TABLE_COLUMNS})
        return path


def _replicate_seeds(seed: int, n: int):
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def run_replicate(cfg: SimulationConfig, model: str, model_cfg: ModelConfig, k: int, rep_seed: int):
    rng = np.random.default_rng(rep_seed)
    setting = cfg.setting_for(k)
    truth = gen_true_proportions(cfg, rng, setting)
    obs = gen_observed(cfg, truth, rng)
    h = grid_hierarchy(cfg.years)
    ests = to_estimates(cfg, obs)
    mcfg = replace(model_cfg, seed=rep_seed % (2**31))
    draws = fit_model(ests, h, mcfg, model, years=cfg.years, domain=(0.0, 0.0, float(GRID), float(GRID)))
    return score_replicate(draws, truth), setting


def _worker(args):
    cfg, model, model_cfg, k, s = args
    try:
        return run_replicate(cfg, model, model_cfg, k, s)
    except Exception as exc:  # replicate is flagged and excluded
        logger.warning("replicate %d failed: %s", k, exc)
        return None


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get("SURVEY_DISAGG_THREADS", "1")))
    except ValueError:
        return 1


def run_study(cfg: SimulationConfig, model: str, model_cfg: ModelConfig, replicates=None) -> StudyResult:
    """Fit every replicate and average the per-year score rows across replicates."""
    n = cfg.replicates if replicates is None else replicates
    seeds = _replicate_seeds(cfg.seed, n)
    jobs = [(cfg, model, model_cfg, k, seeds[k]) for k in range(n)]
    workers = min(n_workers(), n)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_worker, jobs))
    else:
        results = [_worker(j) for j in jobs]
    ok = [r for r in results if r is not None]
    if not ok:
        raise RuntimeError("every replicate failed")
    per_rep = [r[0] for r in ok]
    T = len(per_rep[0])
    table = []
    for t in range(T):
        row = {"t": t + 1}
        for key in TABLE_COLUMNS[1:]:
            row[key] = float(np.mean([rep[t][key] for rep in per_rep]))
        table.append(row)
    return StudyResult(model, table, per_rep, failed=len(results) - len(ok), settings=[r[1] for r in ok])


def config_dict(cfg: SimulationConfig) -> dict:
    return asdict(cfg)
