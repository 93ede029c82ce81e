"""Forward generators for oracle tests: gravity-law flux and planted migration patterns."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Mapping

import numpy as np

from .geo import CityAttributes, CostMatrix, geo_cost_matrix
from .gravity import Family
from .ingest import FluxMatrix, Pair, canonical_pair

WINDOW_START = datetime(2017, 1, 13, tzinfo=timezone.utc)
WINDOW_DAYS = 40


def random_cities(n: int, rng: np.random.Generator, n_provinces: int = 5) -> dict[str, CityAttributes]:
    cities = {}
    for i in range(n):
        gdp = float(math.exp(rng.uniform(np.log(1e2), np.log(2e4))))
        pop = float(math.exp(rng.uniform(np.log(50.0), np.log(2e3))))
        cid = f"C{i:03d}"
        cities[cid] = CityAttributes(
            city_id=cid,
            name=f"city{i}",
            longitude=float(rng.uniform(98.0, 122.0)),
            latitude=float(rng.uniform(20.0, 45.0)),
            gdp=gdp,
            gdp_per_capita=gdp / pop * 1e4,
            population=pop,
            province_id=f"P{i % n_provinces}",
        )
    return cities


def random_pairs(cities: Mapping[str, CityAttributes], n_pairs: int, rng: np.random.Generator, directed: bool = False) -> list[Pair]:
    ids = sorted(cities)
    if directed:
        universe = [(a, b) for a in ids for b in ids if a != b]
    else:
        universe = [(a, b) for i, a in enumerate(ids) for b in ids[i + 1:]]
    if n_pairs > len(universe):
        raise ValueError(f"only {len(universe)} pairs available")
    idx = rng.choice(len(universe), size=n_pairs, replace=False)
    return sorted(universe[i] for i in idx)


def random_costs(pairs, metric: str, rng: np.random.Generator, low: float = 10.0, high: float = 3000.0) -> CostMatrix:
    entries = {}
    for a, b in pairs:
        key = canonical_pair(a, b)
        if key not in entries:
            entries[key] = float(math.exp(rng.uniform(math.log(low), math.log(high))))
    return CostMatrix(metric, dict(sorted(entries.items())))


def gravity_flux(
    family: Family,
    cities: Mapping[str, CityAttributes],
    costs: CostMatrix,
    pairs,
    log_a: float = 0.0,
    alpha: float = 1.0,
    beta: float = 1.0,
    gamma: float = 0.5,
    sigma: float = 0.0,
    rng: np.random.Generator | None = None,
) -> FluxMatrix:
    """Real-valued flux ``a m_i^alpha m_j^beta / C^gamma``, times lognormal noise when ``sigma > 0``."""
    family = Family(family)
    if family.constrained:
        alpha = beta = 1.0
    source = family.mass_source
    entries = {}
    for a, b in pairs:
        key = (a, b) if family.directed else canonical_pair(a, b)
        log_f = (log_a + alpha * math.log(getattr(cities[a], source))
                 + beta * math.log(getattr(cities[b], source)) - gamma * math.log(costs.get(a, b)))
        if sigma > 0:
            log_f += sigma * rng.standard_normal()
        entries[key] = math.exp(log_f)
    return FluxMatrix(family.directed, dict(sorted(entries.items())))


@dataclass(frozen=True)
class SyntheticDataset:
    cities: dict[str, CityAttributes]
    costs: dict[str, CostMatrix]
    directed: FluxMatrix
    messages: list[tuple[str, str, str, str]]


def synthetic_dataset(
    n_cities: int = 30,
    n_pairs: int = 200,
    seed: int = 0,
    gamma: float = 0.4,
    scale: float = 5e-5,
    sigma: float = 0.3,
) -> SyntheticDataset:
    """Cities, three cost tables and a message log whose flux follows G-GM on travel time.

    Each directed trip becomes one user posting at the origin and then at the
    destination, so extraction recovers the generated integer counts exactly.
    """
    rng = np.random.default_rng(seed)
    cities = random_cities(n_cities, rng)
    geo = geo_cost_matrix(cities)
    travel_km = CostMatrix("travel_km", {p: d * rng.uniform(1.1, 1.6) for p, d in geo.entries.items()})
    travel_min = CostMatrix("travel_min", {p: d / rng.uniform(0.8, 1.6) for p, d in travel_km.entries.items()})
    pairs = random_pairs(cities, n_pairs, rng, directed=True)
    expected = gravity_flux(Family.DIRG_GM, cities, travel_min, pairs, log_a=math.log(scale),
                            gamma=gamma, sigma=sigma, rng=rng)
    counts = {p: max(1, int(round(v))) for p, v in expected.items()}
    messages = []
    span = WINDOW_DAYS * 86400 - 7200
    uid = 0
    for (a, b), n in counts.items():
        for _ in range(n):
            t0 = WINDOW_START + timedelta(seconds=int(rng.integers(span)))
            t1 = t0 + timedelta(seconds=int(rng.integers(60, 7200)))
            messages.append((f"m{2 * uid}", f"u{uid}", t0.isoformat(), a))
            messages.append((f"m{2 * uid + 1}", f"u{uid}", t1.isoformat(), b))
            uid += 1
    return SyntheticDataset(cities, {"geo_km": geo, "travel_km": travel_km, "travel_min": travel_min},
                            FluxMatrix(True, counts), messages)


PLANTED_DIRECTIONS = {
    # (gdp product, travel time, flux) in normalised units
    "I": (0.35, 0.05, 0.90),
    "II": (0.90, 0.15, 0.30),
    "III": (0.45, 0.45, 0.10),
    "IV": (0.03, 0.95, 0.01),
}


@dataclass(frozen=True)
class PlantedPatterns:
    cities: dict[str, CityAttributes]
    flux: FluxMatrix
    travel_time: CostMatrix
    truth: dict[Pair, str]


def planted_patterns(n_per_group: int = 10, seed: int = 0, jitter: float = 0.02) -> PlantedPatterns:
    """Disjoint city pairs whose feature vectors sit near four well-separated directions."""
    rng = np.random.default_rng(seed)
    cities, flux, times, truth = {}, {}, {}, {}
    idx = 0
    for label, centre in PLANTED_DIRECTIONS.items():
        for _ in range(n_per_group):
            g, t, f = np.clip(np.asarray(centre) + rng.uniform(-jitter, jitter, 3), 0.0, 1.0)
            product = 1e4 + g * 1e6
            a, b = f"C{idx:03d}", f"C{idx + 1:03d}"
            idx += 2
            for cid in (a, b):
                cities[cid] = CityAttributes(cid, cid, 110.0 + idx * 0.01, 30.0, math.sqrt(product),
                                             1.0, 1.0, f"P{idx % 3}")
            flux[(a, b)] = int(round(1 + f * 10000))
            times[(a, b)] = 10.0 + t * 600.0
            truth[(a, b)] = label
    return PlantedPatterns(cities, FluxMatrix(False, flux), CostMatrix("travel_min", times), truth)
