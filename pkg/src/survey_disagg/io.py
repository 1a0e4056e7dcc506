"""File formats: estimate, hierarchy, population and truth CSVs, geometry JSON, YAML configs.

Every writer can prefix a ``# config_fingerprint=...`` comment line; every
reader skips ``#`` lines.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import fields
from pathlib import Path

import yaml

from .design_effect import SurveyEstimate
from .geometry import ArealHierarchy, ArealUnit
from .model.observations import ModelConfig, Priors

ESTIMATE_COLUMNS = ("area_id", "period_len", "end_year", "estimate", "std_error", "sample_size")


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def fingerprint_of(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:16]


def header_line(fingerprint: str) -> str:
    return f"# config_fingerprint={fingerprint}\n"


def read_header_fingerprint(path):
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    if first.startswith("# config_fingerprint="):
        return first.strip().split("=", 1)[1]
    return None


def _rows(path, required):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(line for line in f if not line.startswith("#"))
        if reader.fieldnames is None or not set(required) <= set(reader.fieldnames):
            raise InputError(f"{path}: header must contain {list(required)}, got {reader.fieldnames}")
        return list(reader)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, float) else str(x)


def _write_rows(path, columns, rows, fingerprint=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        if fingerprint:
            f.write(header_line(fingerprint))
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def write_table(path, rows: list, columns=None, fingerprint=None) -> Path:
    """Write a list of dicts."""
    columns = list(columns or (rows[0].keys() if rows else []))
    return _write_rows(path, columns, ([r[c] for c in columns] for r in rows), fingerprint)


# --- estimates --------------------------------------------------------------


def read_estimates(path) -> list:
    out = []
    for k, row in enumerate(_rows(path, ESTIMATE_COLUMNS[:5]), start=2):
        try:
            size = row.get("sample_size") or None
            out.append(
                SurveyEstimate(
                    area_id=row["area_id"],
                    period_len=int(row["period_len"]),
                    end_year=int(row["end_year"]),
                    estimate=float(row["estimate"]),
                    std_error=float(row["std_error"]),
                    raw_sample_size=int(size) if size is not None else None,
                )
            )
        except (TypeError, ValueError) as exc:
            raise InputError(f"{path}: line {k}: {exc}") from None
        if not all(math.isfinite(v) for v in (out[-1].estimate, out[-1].std_error)):
            raise InputError(f"{path}: line {k}: non-finite value")
    return out


def write_estimates(path, estimates, fingerprint=None) -> Path:
    rows = (
        (e.area_id, e.period_len, e.end_year, float(e.estimate), float(e.std_error),
         "" if e.raw_sample_size is None else e.raw_sample_size)
        for e in estimates
    )
    return _write_rows(path, ESTIMATE_COLUMNS, rows, fingerprint)


# --- hierarchy --------------------------------------------------------------


def write_hierarchy(out_dir, h: ArealHierarchy, fingerprint=None) -> dict:
    """Write ``hierarchy.csv``, ``populations.csv`` and ``geometry.json``; return their paths."""
    out_dir = Path(out_dir)
    paths = {
        "hierarchy": _write_rows(
            out_dir / "hierarchy.csv",
            ("tract_id", "puma_id", "county_id"),
            ((t, h.tract_to_puma[t], h.tract_to_county[t]) for t in sorted(h.tract_to_puma)),
            fingerprint,
        ),
        "populations": _write_rows(
            out_dir / "populations.csv",
            ("area_id", "year", "population"),
            ((a, y, float(n)) for (a, y), n in sorted(h.populations.items())),
            fingerprint,
        ),
    }
    units = [
        {"area_id": u.area_id, "level": u.level, "rings": [r.tolist() for r in u.rings], "centroid": list(u.centroid)}
        for u in list(h.tracts.values()) + list(h.pumas.values())
    ]
    geo = out_dir / "geometry.json"
    geo.write_text(json.dumps({"config_fingerprint": fingerprint, "areas": units}, indent=1) + "\n", encoding="utf-8")
    paths["geometry"] = geo
    return paths


def read_hierarchy(hierarchy_csv, populations_csv, geometry_json=None) -> ArealHierarchy:
    h = ArealHierarchy()
    for row in _rows(hierarchy_csv, ("tract_id", "puma_id", "county_id")):
        t = row["tract_id"]
        if t in h.tract_to_puma:
            raise InputError(f"{hierarchy_csv}: tract {t} listed twice")
        h.tract_to_puma[t] = row["puma_id"]
        h.tract_to_county[t] = row["county_id"]
    for row in _rows(populations_csv, ("area_id", "year", "population")):
        try:
            h.populations[(row["area_id"], int(row["year"]))] = float(row["population"])
        except ValueError as exc:
            raise InputError(f"{populations_csv}: {exc}") from None
    if geometry_json is not None:
        try:
            doc = json.loads(Path(geometry_json).read_text(encoding="utf-8"))
            areas = doc["areas"] if isinstance(doc, dict) else doc
            for a in areas:
                unit = ArealUnit(a["area_id"], a["level"], a["rings"], a["centroid"])
                (h.pumas if unit.level == "puma" else h.tracts)[unit.area_id] = unit
        except (OSError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{geometry_json}: {exc}") from None
    return h


# --- truth ------------------------------------------------------------------


def read_truth(path) -> dict:
    """``support_name,truth`` CSV as a dict."""
    out = {}
    for row in _rows(path, ("support_name", "truth")):
        name = row["support_name"]
        if name in out:
            raise InputError(f"{path}: duplicate support {name!r}")
        out[name] = float(row["truth"])
    return out


def read_summary(path) -> dict:
    """``support_name,mean,...`` CSV as name -> row of floats."""
    return {r["support_name"]: {k: float(v) for k, v in r.items() if k != "support_name"}
            for r in _rows(path, ("support_name", "mean"))}


# --- configuration ----------------------------------------------------------

MODEL_KEYS = {"M", "J", "r", "q", "eps", "jitter", "exact_max", "cov_every", "alpha_steps", "quad_seed"}
MCMC_KEYS = {"iters", "burnin", "thin", "seed", "chains", "target_accept", "ess_floor"}


def load_config(path) -> dict:
    """Parse a YAML config into a plain nested dict (empty file -> ``{}``)."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise InputError(f"{path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise InputError(f"{path}: top level must be a mapping")
    return doc


def model_config_from(doc: dict, **overrides) -> ModelConfig:
    """Build a :class:`ModelConfig` from the ``model``, ``priors`` and ``mcmc`` sections."""
    model = dict(doc.get("model") or {})
    mcmc = dict(doc.get("mcmc") or {})
    priors = dict(doc.get("priors") or {})
    unknown = (set(model) - MODEL_KEYS) | (set(mcmc) - MCMC_KEYS)
    prior_names = {f.name for f in fields(Priors)}
    unknown |= {f"priors.{k}" for k in set(priors) - prior_names}
    if unknown:
        raise InputError(f"unknown config keys: {sorted(unknown)}")
    prior_kw = {k: tuple(v) if isinstance(v, list) else v for k, v in priors.items()}
    kw = {**model, **mcmc, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return ModelConfig(priors=Priors(**prior_kw), **kw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid model config: {exc}") from None
