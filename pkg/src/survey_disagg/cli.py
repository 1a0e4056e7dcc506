"""Batch command line: simulate, fit, predict, validate, summarize.

Exit codes: 0 success, 2 invalid input or configuration, 3 sampler abort,
4 a monitored parameter fell below the chain ESS floor.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from scipy.stats import gaussian_kde, truncnorm

from . import aggregation as agg
from . import io
from .baselines import MODELS, fit_model
from .model.sampler import PosteriorDraws, SamplerError
from .simulation import SimulationConfig, gen_observed, gen_true_proportions, grid_hierarchy, to_estimates, tract_order

logger = logging.getLogger("survey_disagg")

EXIT_INPUT, EXIT_SAMPLER, EXIT_ESS = 2, 3, 4
PARAM_COLUMNS = ("param", "mean", "sd", "q025", "q25", "q50", "q75", "q975", "ess", "geweke_z")
GRID_POINTS = 201
HIST_BINS = 40


class CliError(Exception):
    def __init__(self, message, code=EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config(args) -> dict:
    return io.load_config(args.config) if args.config else {}


def _load_draws(path) -> PosteriorDraws:
    try:
        return PosteriorDraws.load(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"{path}: cannot read draws ({exc})") from None


# --- simulate ---------------------------------------------------------------


def simulation_config_from(doc: dict, seed=None) -> SimulationConfig:
    sim = dict(doc.get("simulation") or {})
    known = {f.name for f in fields(SimulationConfig)}
    unknown = set(sim) - known
    if unknown:
        raise io.InputError(f"unknown simulation keys: {sorted(unknown)}")
    if seed is not None:
        sim["seed"] = seed
    try:
        return SimulationConfig(**sim)
    except (TypeError, ValueError) as exc:
        raise io.InputError(f"invalid simulation config: {exc}") from None


def cmd_simulate(args) -> int:
    """One synthetic replicate in the ingestion formats plus held-out truths."""
    cfg = simulation_config_from(_config(args), args.seed)
    fp = io.fingerprint_of({"simulation": asdict(cfg)})
    out = _out_dir(args)
    rng = np.random.default_rng(cfg.seed)
    truth = gen_true_proportions(cfg, rng)
    obs = gen_observed(cfg, truth, rng)
    years = cfg.years
    h = grid_hierarchy(years)
    io.write_estimates(out / "estimates.csv", to_estimates(cfg, obs), fp)
    io.write_hierarchy(out, h, fp)
    ids = tract_order()
    rows = [(tid, years[t], float(truth.pi[t, g])) for t in range(cfg.T) for g, tid in enumerate(ids)]
    io._write_rows(out / "truth_annual.csv", ("tract_id", "year", "pi"), rows, fp)
    specs = agg.county_period_supports(h, years, 3)
    agg.write_support_specs(out / "supports_county3.csv", specs, io.header_line(fp))
    col = {tid: g for g, tid in enumerate(ids)}
    held = []
    for spec in specs:
        value = sum(w * truth.pi[years.index(y), col[t]] for t, y, w in spec.cells)
        held.append((spec.name, float(value)))
    io._write_rows(out / "truth_county3.csv", ("support_name", "truth"), held, fp)
    logger.info("wrote synthetic dataset (%d supports) to %s", len(specs), out)
    return 0


# --- fit --------------------------------------------------------------------


def _data_paths(args) -> dict:
    base = Path(args.data_dir) if args.data_dir else None
    paths = {}
    for key, default in (("estimates", "estimates.csv"), ("hierarchy", "hierarchy.csv"),
                         ("populations", "populations.csv"), ("geometry", "geometry.json")):
        given = getattr(args, key)
        paths[key] = Path(given) if given else (base / default if base else None)
        if paths[key] is None:
            raise CliError(f"--{key} or --data-dir is required")
    return paths


def _param_rows(draws: PosteriorDraws) -> list:
    rows = []
    for name, x in draws.monitored().items():
        q = np.quantile(x, [0.025, 0.25, 0.5, 0.75, 0.975])
        rows.append({
            "param": name, "mean": float(x.mean()), "sd": float(x.std(ddof=1)) if len(x) > 1 else 0.0,
            "q025": q[0], "q25": q[1], "q50": q[2], "q75": q[3], "q975": q[4],
            "ess": float(draws.ess.get(name, float("nan"))), "geweke_z": float(draws.geweke_z.get(name, float("nan"))),
        })
    return rows


def _cell_rows(draws: PosteriorDraws) -> list:
    """Identity supports: one row per ``(tract, year)`` cell."""
    rows = []
    for t, y in enumerate(draws.years):
        for g, tid in enumerate(draws.tract_ids):
            s = agg.summarize(draws.pi[:, t, g])
            rows.append({"support_name": f"{tid}:{y}:1", **s})
    return rows


def ess_violations(draws: PosteriorDraws, floor: float, fixed=()) -> list:
    """Monitored parameters (excluding fixed ones) whose chain ESS is below ``floor``."""
    return sorted(
        name for name, v in draws.ess.items()
        if name not in fixed and np.std(draws.monitored()[name]) > 0 and v < floor
    )


def cmd_fit(args) -> int:
    doc = _config(args)
    mcfg = io.model_config_from(doc, seed=args.seed, chains=args.chains)
    paths = _data_paths(args)
    estimates = io.read_estimates(paths["estimates"])
    h = io.read_hierarchy(paths["hierarchy"], paths["populations"], paths["geometry"])
    if not estimates:
        raise CliError(f"{paths['estimates']}: no records")
    start = min(e.end_year - e.period_len + 1 for e in estimates)
    years = list(range(start, max(e.end_year for e in estimates) + 1))
    fp = io.fingerprint_of({"model": mcfg.fingerprint(), "model_choice": args.model})
    out = _out_dir(args)
    try:
        draws = fit_model(estimates, h, mcfg, args.model, years=years)
    except SamplerError as exc:
        (out / "sampler_dump.json").write_text(json.dumps({"iteration": exc.iteration, "state": exc.dump}, indent=1, default=str))
        raise CliError(f"sampler aborted: {exc}", EXIT_SAMPLER) from None
    except (KeyError, ValueError) as exc:
        raise CliError(f"invalid input: {exc}") from None
    draws.save(out / "draws.npz")
    io.write_table(out / "summary.csv", _param_rows(draws), PARAM_COLUMNS, fp)
    io.write_table(out / "cells.csv", _cell_rows(draws), agg.SUMMARY_COLUMNS, fp)
    acc = [{"block": k, "acceptance_rate": float(v)} for k, v in sorted(draws.acceptance.items())]
    io.write_table(out / "acceptance.csv", acc, ("block", "acceptance_rate"), fp)
    low = ess_violations(draws, mcfg.ess_floor, mcfg.fixed)
    if low:
        logger.error("chain ESS below %g for: %s", mcfg.ess_floor, ", ".join(low))
        return EXIT_ESS
    return 0


# --- predict ----------------------------------------------------------------


def cmd_predict(args) -> int:
    draws = _load_draws(args.draws)
    try:
        specs = agg.read_support_specs(args.supports)
        values = agg.evaluate_supports(draws, specs)
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot evaluate supports: {exc}") from None
    out = _out_dir(args)
    fp = io.fingerprint_of({"draws": draws.fingerprint, "supports": Path(args.supports).name})
    rows = [{"support_name": k, **agg.summarize(v)} for k, v in values.items()]
    io.write_table(out / "predictions.csv", rows, agg.SUMMARY_COLUMNS, fp)
    names = list(values)
    np.savez_compressed(out / "predictions.npz", names=np.asarray(names, dtype=str),
                        draws=np.column_stack([values[k] for k in names]), fingerprint=fp)
    return 0


# --- validate ---------------------------------------------------------------


def _prediction_draws(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as f:
            return {str(k): f["draws"][:, i] for i, k in enumerate(f["names"])}
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"{path}: cannot read prediction draws ({exc})") from None


def cmd_validate(args) -> int:
    from .metrics import predictive_report, table6_row

    pred = _prediction_draws(args.predictions)
    truth = io.read_truth(args.truth)
    try:
        report = predictive_report(pred, truth)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    fp = io.fingerprint_of({"predictions": Path(args.predictions).name, "truth": Path(args.truth).name})
    out = _out_dir(args)
    keys = ("bias", "mspe", "mape", "pi_coverage_50", "pi_coverage_95")
    row = {"model": args.model, "n_supports": len(truth), **{k: getattr(report, k) for k in keys}}
    io.write_table(out / "validation.csv", [row], None, fp)
    io.write_table(out / "validation_table6.csv", [table6_row(args.model, report)], None, fp)
    logger.info("95%% PI coverage %.3f, MSPE %.3g", report.pi_coverage_95, report.mspe)
    return 0


# --- summarize --------------------------------------------------------------


def target_values(draws: PosteriorDraws, h, target: str) -> np.ndarray:
    """Draws for ``AREA:END_YEAR[:LEN]``: an ``LEN``-year tract or PUMA average."""
    parts = target.split(":")
    if len(parts) not in (2, 3):
        raise CliError(f"target {target!r} must look like AREA:END_YEAR[:LEN]")
    area, end = parts[0], int(parts[1])
    length = int(parts[2]) if len(parts) == 3 else 1
    window = list(range(end - length + 1, end + 1))
    if area in draws.tract_ids:
        tracts = [area]
    elif h is not None and h.tracts_in(area):
        tracts = h.tracts_in(area)
    else:
        raise CliError(f"unknown target area {area!r}")
    try:
        if len(tracts) == 1:
            spec = agg.SupportSpec(target, tuple((area, y, 1.0 / length) for y in window))
        else:
            spec = agg.population_support(h, target, tracts, window)
        return agg.custom_support(draws, spec)
    except (KeyError, ValueError) as exc:
        raise CliError(f"target {target!r}: {exc}") from None


def truncated_normal_density(x, mean, sd):
    """Normal(mean, sd) density restricted and renormalized to ``[0, 1]``."""
    a, b = (0.0 - mean) / sd, (1.0 - mean) / sd
    return truncnorm.pdf(x, a, b, loc=mean, scale=sd)


def density_tables(name, values, reference=None):
    hist, edges = np.histogram(values, bins=HIST_BINS, range=(0.0, 1.0), density=True)
    hist_rows = [{"target": name, "bin_lo": edges[k], "bin_hi": edges[k + 1], "density": hist[k]} for k in range(HIST_BINS)]
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    if np.ptp(values) > 0:
        kde = gaussian_kde(values)(grid)
    else:
        kde = np.zeros_like(grid)
    ref = truncated_normal_density(grid, *reference) if reference else np.full_like(grid, np.nan)
    kde_rows = [{"target": name, "x": grid[k], "density": kde[k], "reference_density": ref[k]} for k in range(GRID_POINTS)]
    return hist_rows, kde_rows


def cmd_summarize(args) -> int:
    draws = _load_draws(args.draws)
    h = None
    if args.hierarchy and args.populations:
        h = io.read_hierarchy(args.hierarchy, args.populations)
    refs = {}
    if args.estimates:
        for e in io.read_estimates(args.estimates):
            if e.std_error > 0:
                refs[f"{e.area_id}:{e.end_year}:{e.period_len}"] = (e.estimate, e.std_error)
    hist_all, kde_all, trace = [], [], []
    for target in args.targets:
        values = target_values(draws, h, target)
        key = target if target.count(":") == 2 else f"{target}:1"
        hist, kde = density_tables(target, values, refs.get(key))
        hist_all += hist
        kde_all += kde
        trace += [{"target": target, "draw": i, "chain": int(draws.chain_id[i]), "value": float(v)} for i, v in enumerate(values)]
    fp = io.fingerprint_of({"draws": draws.fingerprint, "targets": list(args.targets)})
    out = _out_dir(args)
    io.write_table(out / "histogram.csv", hist_all, ("target", "bin_lo", "bin_hi", "density"), fp)
    io.write_table(out / "density.csv", kde_all, ("target", "x", "density", "reference_density"), fp)
    io.write_table(out / "trace.csv", trace, ("target", "draw", "chain", "value"), fp)
    return 0


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="survey-disagg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="YAML configuration file")
        sp.add_argument("--out-dir", default=".", help="directory for outputs")
        return sp

    s = common(sub.add_parser("simulate", help="write a synthetic dataset"))
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    f = common(sub.add_parser("fit", help="run the sampler"))
    f.add_argument("--data-dir", help="directory holding the default-named input files")
    f.add_argument("--estimates")
    f.add_argument("--hierarchy")
    f.add_argument("--populations")
    f.add_argument("--geometry")
    f.add_argument("--seed", type=int)
    f.add_argument("--chains", type=int)
    f.add_argument("--model", choices=MODELS, default="proposed")
    f.set_defaults(func=cmd_fit)

    r = common(sub.add_parser("predict", help="aggregate draws to supports"), config=False)
    r.add_argument("--draws", required=True)
    r.add_argument("--supports", required=True)
    r.set_defaults(func=cmd_predict)

    v = common(sub.add_parser("validate", help="score predictions against held-out values"), config=False)
    v.add_argument("--predictions", required=True, help="predictions.npz written by predict")
    v.add_argument("--truth", required=True, help="CSV support_name,truth")
    v.add_argument("--model", default="proposed")
    v.set_defaults(func=cmd_validate)

    m = common(sub.add_parser("summarize", help="export densities and traces"), config=False)
    m.add_argument("--draws", required=True)
    m.add_argument("--targets", nargs="+", required=True, help="AREA:END_YEAR[:LEN]")
    m.add_argument("--estimates", help="estimates CSV for the truncated-normal reference")
    m.add_argument("--hierarchy")
    m.add_argument("--populations")
    m.set_defaults(func=cmd_summarize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except io.InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
