"""Development and locality indices computed from pattern-labelled flux."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DataError, FormatError
from .geo import CityAttributes, CostMatrix
from .ingest import FluxMatrix, Pair, _skip_comments, canonical_pair

PATTERNS = ("I", "II", "III", "IV")


@dataclass(frozen=True)
class PatternedFlux:
    entries: Mapping[Pair, tuple[float, str]]
    province_of: Mapping[str, str]

    def __post_init__(self):
        for pair, (_, label) in self.entries.items():
            if label not in PATTERNS:
                raise ContractError(f"pair {pair} carries unknown pattern label {label!r}")

    @classmethod
    def from_labels(cls, flux: FluxMatrix, labels: Mapping[Pair, str], province_of: Mapping[str, str]):
        entries = {p: (flux.entries[p], lab) for p, lab in labels.items() if p in flux.entries}
        return cls(entries, province_of)

    def by_city(self) -> dict[str, list[tuple[float, str]]]:
        out: dict[str, list[tuple[float, str]]] = defaultdict(list)
        for (a, b), item in self.entries.items():
            out[a].append(item)
            out[b].append(item)
        return out

    def scaled(self, k: float) -> "PatternedFlux":
        return PatternedFlux({p: (v * k, lab) for p, (v, lab) in self.entries.items()}, self.province_of)


def development_index(pf: PatternedFlux, city: str) -> float:
    """Share of a city's flux that lies on Pattern I or II pairs."""
    num = den = 0.0
    for (a, b), (v, label) in pf.entries.items():
        if city in (a, b):
            den += v
            if label in ("I", "II"):
                num += v
    if den == 0:
        raise DataError(f"city {city} has no flux")
    return num / den


def all_development_indices(pf: PatternedFlux) -> dict[str, float]:
    out = {}
    for city, items in sorted(pf.by_city().items()):
        den = sum(v for v, _ in items)
        out[city] = sum(v for v, lab in items if lab in ("I", "II")) / den
    return out


def province_pattern_ratio(pf: PatternedFlux, province: str) -> tuple[float, float, float, float]:
    """Pattern shares of the flux touching a province's cities.

    The outer sum runs over member cities, so a pair joining two cities of
    the same province is counted once per endpoint.
    """
    members = {c for c, p in pf.province_of.items() if p == province}
    totals = dict.fromkeys(PATTERNS, 0.0)
    for (a, b), (v, label) in pf.entries.items():
        hits = (a in members) + (b in members)
        totals[label] += hits * v
    den = sum(totals.values())
    if den == 0:
        raise DataError(f"province {province} has no flux")
    return tuple(totals[k] / den for k in PATTERNS)


def all_province_ratios(pf: PatternedFlux) -> dict[str, tuple[float, float, float, float]]:
    touched = {pf.province_of[c] for pair in pf.entries for c in pair if c in pf.province_of}
    return {p: province_pattern_ratio(pf, p) for p in sorted(touched)}


def _ranked_neighbours(city: str, candidates: Iterable[str], costs: CostMatrix) -> list[tuple[float, str]]:
    ranked = []
    for other in candidates:
        if other == city:
            continue
        c = costs.get(city, other)
        if c is not None:
            ranked.append((c, other))
    ranked.sort()
    return ranked


def locality_curve(flux: FluxMatrix, travel_time: CostMatrix, city: str) -> list[tuple[int, float]]:
    """Cumulative flux share of the r nearest neighbours, ranked by cost then id."""
    und = flux.undirected()
    neighbour_flux = {}
    for (a, b), v in und.items():
        if a == city:
            neighbour_flux[b] = v
        elif b == city:
            neighbour_flux[a] = v
    ranked = _ranked_neighbours(city, neighbour_flux, travel_time)
    if not ranked:
        raise DataError(f"city {city} has no neighbour with both flux and cost")
    values = [neighbour_flux[other] for _, other in ranked]
    total = sum(values)
    curve, running = [], 0.0
    for r, v in enumerate(values, start=1):
        running += v
        curve.append((r, running / total))
    curve[-1] = (len(values), 1.0)
    return curve


def gdp_match_curve(attrs: Mapping[str, CityAttributes], travel_time: CostMatrix, city: str) -> list[tuple[int, float]]:
    """Mean GDP of the r time-nearest cities relative to the city's own GDP."""
    own = attrs[city].gdp
    if own <= 0:
        raise DataError(f"city {city} has nonpositive GDP")
    ranked = _ranked_neighbours(city, attrs, travel_time)
    if not ranked:
        raise DataError(f"city {city} has no neighbour with a travel time")
    curve, running = [], 0.0
    for r, (_, other) in enumerate(ranked, start=1):
        running += attrs[other].gdp
        curve.append((r, running / (r * own)))
    return curve


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError("pearson needs two 1-d sequences of equal length")
    if len(x) < 3:
        raise ContractError("pearson needs at least 3 observations")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DataError("pearson undefined for zero variance")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def load_pair_covariate(path: str | Path) -> dict[Pair, float]:
    """Read a ``city_a,city_b,value`` CSV into canonical pair keys."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_skip_comments(fh))
        if not {"city_a", "city_b", "value"} <= set(reader.fieldnames or ()):
            raise FormatError(f"{path}: covariate header must be city_a,city_b,value")
        out = {}
        for row in reader:
            key = canonical_pair(row["city_a"].strip(), row["city_b"].strip())
            value = float(row["value"])
            if key in out and out[key] != value:
                raise FormatError(f"{path}: conflicting values for {key}")
            out[key] = value
    return out


def load_province_covariate(path: str | Path) -> dict[str, float]:
    """Read a ``province_id,value`` CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_skip_comments(fh))
        if not {"province_id", "value"} <= set(reader.fieldnames or ()):
            raise FormatError(f"{path}: province covariate header must be province_id,value")
        return {row["province_id"].strip(): float(row["value"]) for row in reader}


def correlate_pairs(flux: FluxMatrix, covariate: Mapping[Pair, float]) -> tuple[float, int]:
    """Pearson r between flux and a pair covariate over their shared pairs."""
    und = flux.undirected()
    shared = sorted(set(und.entries) & set(covariate))
    r = pearson([und.entries[p] for p in shared], [covariate[p] for p in shared])
    return r, len(shared)


def correlate_provinces(pf: PatternedFlux, covariate: Mapping[str, float], patterns=("III", "IV")) -> tuple[float, int]:
    """Pearson r between a province covariate and the provinces' share of ``patterns``."""
    ratios = all_province_ratios(pf)
    shared = sorted(set(ratios) & set(covariate))
    share = [sum(ratios[p][PATTERNS.index(k)] for k in patterns) for p in shared]
    return pearson([covariate[p] for p in shared], share), len(shared)


def representative_cities(
    pf: PatternedFlux,
    thresholds: Mapping[str, float] | None = None,
    top: int = 5,
) -> dict[str, list[str]]:
    """Heuristic: cities whose flux share in a pattern exceeds a threshold, largest pattern flux first.

    Threshold defaults are 0.5, except 0.4 for Pattern III. Not a validated
    reproduction of any published city list.
    """
    thresholds = dict(thresholds or {"I": 0.5, "II": 0.5, "III": 0.4, "IV": 0.5})
    per_city = pf.by_city()
    out = {}
    for label in PATTERNS:
        scored = []
        for city, items in per_city.items():
            total = sum(v for v, _ in items)
            in_pattern = sum(v for v, lab in items if lab == label)
            if total and in_pattern / total > thresholds[label]:
                scored.append((-in_pattern, city))
        out[label] = [c for _, c in sorted(scored)[:top]]
    return out


def write_rows(header: Sequence[str], rows: Iterable[Sequence], out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
