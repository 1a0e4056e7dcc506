"""Per-draw aggregation of annual tract proportions to other supports.

Every function returns one value per posterior draw, so interval summaries of
an aggregate carry the full joint uncertainty of its cells.
"""
from __future__ import annotations

import csv
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import ArealHierarchy

logger = logging.getLogger(__name__)

WEIGHT_TOL = 1e-9
SUMMARY_COLUMNS = ("support_name", "mean", "sd", "q025", "q975")


@dataclass(frozen=True)
class SupportSpec:
    """A named weighted average of ``(tract_id, year)`` cells."""

    name: str
    cells: tuple  # ((tract_id, year, weight), ...)

    def __post_init__(self):
        cells = tuple((str(t), int(y), float(w)) for t, y, w in self.cells)
        object.__setattr__(self, "cells", cells)
        if not cells:
            raise ValueError(f"support {self.name!r} has no cells")
        if any(not (w >= 0.0) for _, _, w in cells):
            raise ValueError(f"support {self.name!r} has a negative weight")
        total = math.fsum(w for _, _, w in cells)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise ValueError(f"support {self.name!r} weights sum to {total!r}, not 1")

    @classmethod
    def normalized(cls, name, cells) -> "SupportSpec":
        """Build a spec after rescaling nonnegative weights to sum to one."""
        cells = list(cells)
        total = math.fsum(float(w) for _, _, w in cells)
        if not total > 0.0:
            raise ValueError(f"support {name!r} has zero total weight")
        return cls(name, tuple((t, y, float(w) / total) for t, y, w in cells))


def custom_support(draws, spec: SupportSpec) -> np.ndarray:
    """``sum_k w_k pi(tract_k, year_k)`` for every draw."""
    missing = [(t, y) for t, y, _ in spec.cells if not draws.has_cell(t, y)]
    if missing:
        raise KeyError(f"support {spec.name!r}: cells absent from draws: {missing}")
    out = np.zeros(draws.n_draws)
    for t, y, w in spec.cells:
        if w:
            out += w * draws.cell(t, y)
    return out


def five_year_average(draws, tract, end_year) -> np.ndarray:
    """Mean of the five annual proportions ending at ``end_year``."""
    years = range(int(end_year) - 4, int(end_year) + 1)
    absent = [y for y in years if not draws.has_cell(tract, y)]
    if absent:
        raise KeyError(f"{tract}: years {absent} missing for the 5-year average ending {end_year}")
    return custom_support(draws, SupportSpec(f"{tract}:{end_year}:5", tuple((tract, y, 0.2) for y in years)))


def _population(h: ArealHierarchy, tract, year) -> float:
    if (tract, year) in h.populations:
        return float(h.populations[(tract, year)])
    known = [y for (a, y) in h.populations if a == tract]
    if not known:
        raise KeyError(f"no population recorded for {tract}")
    nearest = min(known, key=lambda y: (abs(y - year), y))
    logger.warning("population of %s missing for %s; using %s", tract, year, nearest)
    return float(h.populations[(tract, nearest)])


def population_support(h: ArealHierarchy, name, tracts, years) -> SupportSpec:
    """Population-weighted tract mean per year, averaged evenly over ``years``."""
    tracts, years = list(tracts), [int(y) for y in years]
    if not tracts or not years:
        raise ValueError(f"support {name!r} needs tracts and years")
    cells = []
    for y in years:
        pops = np.array([_population(h, t, y) for t in tracts])
        if np.any(pops < 0):
            raise ValueError(f"support {name!r}: negative population in {y}")
        total = pops.sum()
        if not total > 0.0:
            raise ValueError(f"support {name!r}: zero population in {y}")
        cells.extend((t, y, p / total / len(years)) for t, p in zip(tracts, pops))
    return SupportSpec.normalized(name, cells)


def puma_aggregate(draws, h: ArealHierarchy, puma, year) -> np.ndarray:
    """Population-weighted mean of member-tract proportions in one year."""
    members = h.tracts_in(puma)
    if not members:
        raise KeyError(f"unknown PUMA {puma}")
    return custom_support(draws, population_support(h, f"{puma}:{year}", members, [year]))


def county_period_supports(h: ArealHierarchy, years, length: int = 3) -> list:
    """One spec per county and ``length``-year window inside ``years``."""
    years = sorted(int(y) for y in years)
    specs = []
    for county in h.counties:
        members = h.tracts_in_county(county)
        for end in years:
            window = list(range(end - length + 1, end + 1))
            if window[0] in years and all(y in years for y in window):
                specs.append(population_support(h, f"{county}:{end}:{length}", members, window))
    return specs


def summarize(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {
        "mean": float(v.mean()),
        "sd": float(v.std(ddof=1)) if v.size > 1 else 0.0,
        "q025": float(np.quantile(v, 0.025)),
        "q975": float(np.quantile(v, 0.975)),
    }


def evaluate_supports(draws, specs) -> dict:
    """Name -> per-draw aggregate for every spec."""
    out = {}
    for spec in specs:
        if spec.name in out:
            raise ValueError(f"duplicate support name {spec.name!r}")
        out[spec.name] = custom_support(draws, spec)
    return out


def read_support_specs(path) -> list:
    """Parse a ``support_name,tract_id,year,weight`` CSV, keeping first-seen order."""
    groups = defaultdict(list)
    with open(path, newline="", encoding="utf-8") as f:
        rows = csv.DictReader(line for line in f if not line.startswith("#"))
        need = {"support_name", "tract_id", "year", "weight"}
        if rows.fieldnames is None or not need <= set(rows.fieldnames):
            raise ValueError(f"{path}: header must contain {sorted(need)}")
        for row in rows:
            groups[row["support_name"]].append((row["tract_id"], int(row["year"]), float(row["weight"])))
    return [SupportSpec(name, tuple(cells)) for name, cells in groups.items()]


def write_support_specs(path, specs, header: str = "") -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        if header:
            f.write(header.rstrip("\n") + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["support_name", "tract_id", "year", "weight"])
        for spec in specs:
            for t, y, wt in spec.cells:
                w.writerow([spec.name, t, y, repr(wt)])
    return path
