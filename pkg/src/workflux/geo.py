"""City attributes, great-circle distance and inter-city cost tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DataError, FormatError
from .ingest import FluxMatrix, Pair, _skip_comments, canonical_pair

EARTH_DIAMETER_KM = 12742.0
METRICS = ("geo_km", "travel_km", "travel_min")
CITY_COLUMNS = ("city_id", "name", "longitude", "latitude", "gdp", "gdp_per_capita", "population", "province_id")


@dataclass(frozen=True, slots=True)
class CityAttributes:
    city_id: str
    name: str
    longitude: float
    latitude: float
    gdp: float
    gdp_per_capita: float
    population: float
    province_id: str

    def __post_init__(self):
        if not -180.0 <= self.longitude <= 180.0:
            raise DataError(f"{self.city_id}: longitude {self.longitude} out of range")
        if not -90.0 <= self.latitude <= 90.0:
            raise DataError(f"{self.city_id}: latitude {self.latitude} out of range")
        for name in ("gdp", "gdp_per_capita", "population"):
            if not getattr(self, name) > 0:
                raise DataError(f"{self.city_id}: {name} must be positive")

    @property
    def coords(self) -> tuple[float, float]:
        return (self.longitude, self.latitude)


def load_city_attributes(path: str | Path) -> dict[str, CityAttributes]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_skip_comments(fh))
        missing = set(CITY_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise FormatError(f"{path}: city attribute file lacks columns {sorted(missing)}")
        cities = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                attrs = CityAttributes(
                    city_id=row["city_id"].strip(),
                    name=row["name"].strip(),
                    longitude=float(row["longitude"]),
                    latitude=float(row["latitude"]),
                    gdp=float(row["gdp"]),
                    gdp_per_capita=float(row["gdp_per_capita"]),
                    population=float(row["population"]),
                    province_id=row["province_id"].strip(),
                )
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if attrs.city_id in cities:
                raise FormatError(f"{path}:{lineno}: duplicate city {attrs.city_id}")
            cities[attrs.city_id] = attrs
    return cities


def write_city_attributes(cities: Mapping[str, CityAttributes], out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CITY_COLUMNS)
    for cid in sorted(cities):
        c = cities[cid]
        writer.writerow((c.city_id, c.name, repr(c.longitude), repr(c.latitude), repr(c.gdp),
                         repr(c.gdp_per_capita), repr(c.population), c.province_id))


def great_circle_km(a: tuple[float, float], b: tuple[float, float], diameter_km: float = EARTH_DIAMETER_KM) -> float:
    """Haversine distance between two ``(lon, lat)`` points given in degrees."""
    lon_a, lat_a = map(math.radians, a)
    lon_b, lat_b = map(math.radians, b)
    h = (math.sin((lat_a - lat_b) / 2) ** 2
         + math.cos(lat_a) * math.cos(lat_b) * math.sin((lon_a - lon_b) / 2) ** 2)
    # rounding can push h a hair above 1 for antipodes
    return diameter_km * math.asin(math.sqrt(min(1.0, h)))


@dataclass(frozen=True)
class CostMatrix:
    """Symmetric pair -> positive cost map keyed by canonical pairs."""

    metric: str
    entries: Mapping[Pair, float]

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown cost metric {self.metric!r}")

    def get(self, a: str, b: str) -> float | None:
        return self.entries.get(canonical_pair(a, b))

    def __contains__(self, pair: Pair) -> bool:
        return canonical_pair(*pair) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def scaled(self, k: float) -> "CostMatrix":
        return CostMatrix(self.metric, {p: v * k for p, v in self.entries.items()})


def cost_matrix_from_pairs(metric: str, values: Iterable[tuple[str, str, float]], source: str = "<costs>") -> CostMatrix:
    entries: dict[Pair, float] = {}
    for a, b, cost in values:
        if not cost > 0:
            raise DataError(f"{source}: nonpositive cost {cost} for ({a}, {b})")
        if a == b:
            raise DataError(f"{source}: self pair ({a}, {b})")
        key = canonical_pair(a, b)
        if key in entries and entries[key] != cost:
            raise DataError(f"{source}: conflicting duplicate for {key}: {entries[key]} vs {cost}")
        entries[key] = cost
    return CostMatrix(metric, dict(sorted(entries.items())))


def load_cost_table(path: str | Path, metric: str) -> CostMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_cost_table(fh, metric, source=str(path))


def parse_cost_table(lines, metric: str, source: str = "<costs>") -> CostMatrix:
    reader = csv.DictReader(_skip_comments(lines))
    missing = {"city_a", "city_b", "cost"} - set(reader.fieldnames or ())
    if missing:
        raise FormatError(f"{source}: cost table lacks columns {sorted(missing)}")

    def rows():
        for lineno, row in enumerate(reader, start=2):
            try:
                yield row["city_a"].strip(), row["city_b"].strip(), float(row["cost"])
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{source}:{lineno}: bad cost row") from exc

    return cost_matrix_from_pairs(metric, rows(), source)


def write_cost_table(costs: CostMatrix, out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("city_a", "city_b", "cost"))
    for (a, b), v in sorted(costs.entries.items()):
        writer.writerow((a, b, repr(float(v))))


def geo_cost_matrix(
    cities: Mapping[str, CityAttributes],
    pairs: Iterable[Pair] | None = None,
    diameter_km: float = EARTH_DIAMETER_KM,
) -> CostMatrix:
    """Great-circle costs for ``pairs`` (default: every pair of distinct cities).

    Pairs of cities with identical coordinates get no entry, since costs must
    be positive; they show up in the coverage report instead.
    """
    if pairs is None:
        ids = sorted(cities)
        keys = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]]
    else:
        keys = sorted({canonical_pair(*p) for p in pairs if p[0] in cities and p[1] in cities})
    entries = {}
    for a, b in keys:
        d = great_circle_km(cities[a].coords, cities[b].coords, diameter_km)
        if d > 0:
            entries[(a, b)] = d
    return CostMatrix("geo_km", entries)


@dataclass(frozen=True)
class CoverageReport:
    missing: list[Pair]
    n_covered: int

    @property
    def n_missing(self) -> int:
        return len(self.missing)


def coverage_report(flux: FluxMatrix, costs: CostMatrix) -> CoverageReport:
    missing = [pair for pair in flux if pair not in costs]
    return CoverageReport(missing=sorted(missing), n_covered=len(flux) - len(missing))
