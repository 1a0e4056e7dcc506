"""Standard binomial disaggregation model.

Same hierarchy and sampler as the proposed model; only the working counts
differ (raw sample sizes and raw numbers of cases instead of effective ones).
"""
from __future__ import annotations

from .design_effect import SurveyEstimate, round_half_away
from .model.observations import ModelConfig, assemble_observations
from .model.sampler import PosteriorDraws, prepare_fit_data, run_chains

MODELS = ("proposed", "standard-binomial")


def raw_counts(est: SurveyEstimate) -> tuple[int, int]:
    """``(m, q)`` with ``m`` the raw sample size and ``q = [m z]`` kept in ``[0, m]``."""
    if est.raw_sample_size is None:
        raise ValueError(
            f"{est.area_id}/{est.end_year}: raw sample size required by the standard binomial model"
        )
    m = int(est.raw_sample_size)
    return m, min(max(round_half_away(m * est.estimate), 0), m)


def fit_model(estimates, h, cfg: ModelConfig, model: str = "proposed", years=None, domain=None) -> PosteriorDraws:
    """Fit either model; the choice only changes how counts are built."""
    if model not in MODELS:
        raise ValueError(f"unknown model {model!r}; choose from {MODELS}")
    counts = "effective" if model == "proposed" else "raw"
    obs = assemble_observations(estimates, h, cfg.eps, years=years, counts=counts)
    data = prepare_fit_data(obs, h, cfg, years=years, domain=domain)
    return run_chains(cfg, data)


def fit_standard_binomial(estimates, h, cfg: ModelConfig, years=None, domain=None) -> PosteriorDraws:
    return fit_model(estimates, h, cfg, "standard-binomial", years=years, domain=domain)
