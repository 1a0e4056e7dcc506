"""Areal hierarchy (tracts in PUMAs, tracts in counties) and polygon quadrature."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .kernels import points_in_rings

LEVELS = ("tract", "puma", "county", "custom")
MAX_PROPOSALS = 1_000_000


def _ring_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def _segments_cross(p1, p2, p3, p4, tol):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return ((d1 > tol and d2 < -tol) or (d1 < -tol and d2 > tol)) and (
        (d3 > tol and d4 < -tol) or (d3 < -tol and d4 > tol)
    )


def ring_self_intersects(ring: np.ndarray, tol: float = 1e-12) -> bool:
    """Proper crossings between non-adjacent edges of a closed ring."""
    n = len(ring) - 1
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue  # share the closing vertex
            if _segments_cross(ring[i], ring[i + 1], ring[j], ring[j + 1], tol):
                return True
    return False


@dataclass
class ArealUnit:
    """A polygon (outer ring first, holes after) with its centroid."""

    area_id: str
    level: str
    rings: list
    centroid: tuple

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"{self.area_id}: unknown level {self.level!r}")
        self.rings = [np.asarray(r, dtype=np.float64).reshape(-1, 2) for r in self.rings]
        self.centroid = tuple(float(c) for c in self.centroid)

    @property
    def area(self) -> float:
        if not self.rings:
            return 0.0
        outer = abs(_ring_area(self.rings[0]))
        return outer - sum(abs(_ring_area(r)) for r in self.rings[1:])

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        pts = np.vstack(self.rings)
        return float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max())

    def validate(self) -> list[str]:
        problems = []
        if not self.rings:
            return [f"{self.area_id}: no rings"]
        for k, ring in enumerate(self.rings):
            if len(ring) < 4:
                problems.append(f"{self.area_id}: ring {k} has fewer than 3 distinct vertices")
                continue
            if not np.allclose(ring[0], ring[-1]):
                problems.append(f"{self.area_id}: ring {k} is not closed")
            elif ring_self_intersects(ring):
                problems.append(f"{self.area_id}: ring {k} self-intersects")
        if self.area <= 0.0:
            problems.append(f"{self.area_id}: polygon area is not positive")
        return problems

    def contains(self, pts) -> np.ndarray:
        return points_in_rings(pts, self.rings)


def rectangle_unit(area_id, x0, y0, x1, y1, level="tract") -> ArealUnit:
    ring = [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]
    return ArealUnit(area_id, level, [ring], (0.5 * (x0 + x1), 0.5 * (y0 + y1)))


@dataclass
class ArealHierarchy:
    tracts: dict = field(default_factory=dict)
    pumas: dict = field(default_factory=dict)
    tract_to_puma: dict = field(default_factory=dict)
    tract_to_county: dict = field(default_factory=dict)
    populations: dict = field(default_factory=dict)  # (area_id, year) -> N_t(A)

    def tracts_in(self, puma_id) -> list:
        return sorted(t for t, p in self.tract_to_puma.items() if p == puma_id)

    def tracts_in_county(self, county_id) -> list:
        return sorted(t for t, c in self.tract_to_county.items() if c == county_id)

    @property
    def counties(self) -> list:
        return sorted(set(self.tract_to_county.values()))

    def years(self) -> list:
        return sorted({y for (_, y) in self.populations})

    def population(self, area_id, year) -> float:
        if (area_id, year) in self.populations:
            return self.populations[(area_id, year)]
        if area_id in self.pumas or area_id in set(self.tract_to_puma.values()):
            return sum(self.populations[(t, year)] for t in self.tracts_in(area_id))
        raise KeyError((area_id, year))


def validate_hierarchy(h: ArealHierarchy, rel_tol: float = 1e-6, check_geometry: bool = True) -> list[str]:
    """List every violated hierarchy invariant; empty means valid."""
    problems = []
    tract_ids = set(h.tracts) | set(h.tract_to_puma) | set(h.tract_to_county)
    for t in sorted(tract_ids):
        if t not in h.tract_to_puma:
            problems.append(f"tract {t} has no PUMA")
        if t not in h.tract_to_county:
            problems.append(f"tract {t} has no county")
    for t, p in sorted(h.tract_to_puma.items()):
        if h.pumas and p not in h.pumas:
            problems.append(f"tract {t} maps to unknown PUMA {p}")
    for (area, year), n in sorted(h.populations.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        if not (n >= 0):
            problems.append(f"population of {area} in {year} is negative or missing")
    pumas = sorted(set(h.tract_to_puma.values()))
    for p in pumas:
        members = h.tracts_in(p)
        for year in sorted({y for (a, y) in h.populations if a in members}):
            if (p, year) not in h.populations:
                continue
            total = sum(h.populations.get((t, year), 0.0) for t in members)
            stated = h.populations[(p, year)]
            if abs(stated - total) > rel_tol * max(abs(stated), abs(total), 1e-300):
                problems.append(
                    f"PUMA {p} population {stated} in {year} differs from tract sum {total}"
                )
    if check_geometry:
        for unit in list(h.tracts.values()) + list(h.pumas.values()):
            problems.extend(unit.validate())
    return problems


@dataclass
class QuadratureSet:
    area_id: str
    points: np.ndarray
    weights: np.ndarray


def unit_seed(seed: int, area_id: str) -> np.random.Generator:
    """Per-unit generator that does not depend on iteration order."""
    return np.random.default_rng([int(seed), zlib.crc32(str(area_id).encode("utf-8"))])


def quadrature_points(unit: ArealUnit, q: int, seed: int) -> QuadratureSet:
    """``q`` points uniform over the polygon, by rejection from its bounding box."""
    if q < 1:
        raise ValueError("q must be >= 1")
    rng = unit_seed(seed, unit.area_id)
    x0, y0, x1, y1 = unit.bbox
    kept = []
    n_kept = 0
    proposed = 0
    batch = max(4 * q, 64)
    while n_kept < q:
        if proposed >= MAX_PROPOSALS:
            raise RuntimeError(
                f"{unit.area_id}: quadrature rejection failed after {proposed} proposals (degenerate polygon?)"
            )
        cand = np.column_stack([rng.uniform(x0, x1, batch), rng.uniform(y0, y1, batch)])
        proposed += batch
        ok = cand[unit.contains(cand)]
        kept.append(ok)
        n_kept += len(ok)
    pts = np.vstack(kept)[:q]
    return QuadratureSet(unit.area_id, pts, np.full(q, 1.0 / q))


def population_weights(h: ArealHierarchy, puma_id, year) -> dict:
    """Household shares ``N_t(A_ih) / N_t(A_i)`` of the tracts in a PUMA."""
    members = h.tracts_in(puma_id)
    if not members:
        raise KeyError(f"unknown PUMA {puma_id}")
    pops = np.array([h.populations[(t, year)] for t in members], dtype=np.float64)
    total = pops.sum()
    if total <= 0.0:
        raise ValueError(f"PUMA {puma_id} has zero population in {year}")
    return dict(zip(members, pops / total))
