"""Hierarchical model, posterior sampler and convergence diagnostics."""
from .diagnostics import chain_ess, geweke
from .observations import (
    CompiledObservations,
    ModelConfig,
    ModelObservation,
    ModelState,
    Priors,
    assemble_observations,
    compile_observations,
)
from .sampler import FitData, PosteriorDraws, SamplerError, prepare_fit_data, run_chain, run_chains

__all__ = [
    "CompiledObservations",
    "FitData",
    "ModelConfig",
    "ModelObservation",
    "ModelState",
    "PosteriorDraws",
    "Priors",
    "SamplerError",
    "assemble_observations",
    "chain_ess",
    "compile_observations",
    "geweke",
    "prepare_fit_data",
    "run_chain",
    "run_chains",
]
