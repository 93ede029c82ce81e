"""Trajectory features and cosine K-means migration patterns.

Each undirected city pair becomes a 3-vector of min-max normalised GDP
product, travel time and flux. Vectors are partitioned by spherical K-means,
which maximises

    E = sum_k sqrt( sum_{v,u in C_k} cos(v, u) ) = sum_k || sum_{v in C_k} v / ||v|| ||

so the criterion is available in closed form from per-cluster sums of unit
vectors. The same sums give the silhouette coefficient under cosine distance
in O(n k).

Raw flux is heavily skewed and is normalised as-is, without a log transform;
expect most pairs to sit near zero on the flux axis.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ClusteringError, ContractError, DegenerateFeatureError
from .geo import CityAttributes, CostMatrix
from .gravity import CellResult, Family, ModelSpec, fit_flux
from .ingest import FluxMatrix, Pair

FEATURE_NAMES = ("gdp_product", "travel_time", "flux")
PATTERN_LABELS = ("I", "II", "III", "IV")
DEFAULT_RESTARTS = 10
DEFAULT_MAX_ITER = 300


@dataclass(frozen=True)
class FeatureSet:
    pairs: list[Pair]
    raw: np.ndarray  # (n, 3) gdp product, travel time, flux
    vectors: np.ndarray  # (n, 3) min-max normalised
    excluded: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)


def _minmax(col: np.ndarray, name: str) -> np.ndarray:
    lo, hi = col.min(), col.max()
    if hi == lo:
        raise DegenerateFeatureError(name)
    return (col - lo) / (hi - lo)


def build_features(
    flux: FluxMatrix,
    attrs: Mapping[str, CityAttributes],
    travel_time: CostMatrix,
) -> FeatureSet:
    if flux.directed:
        raise ContractError("trajectory features are built from undirected flux")
    excluded = {"missing_attributes": 0, "missing_travel_time": 0, "zero_vector": 0}
    pairs, rows = [], []
    for (a, b), count in sorted(flux.items()):
        if a not in attrs or b not in attrs:
            excluded["missing_attributes"] += 1
            continue
        t = travel_time.get(a, b)
        if t is None:
            excluded["missing_travel_time"] += 1
            continue
        pairs.append((a, b))
        rows.append((attrs[a].gdp * attrs[b].gdp, t, count))
    if len(rows) < 2:
        raise ContractError("need at least two usable pairs to build features")
    raw = np.asarray(rows, dtype=float)
    vectors = np.column_stack([_minmax(raw[:, j], FEATURE_NAMES[j]) for j in range(3)])

    nonzero = np.any(vectors != 0, axis=1)
    excluded["zero_vector"] = int((~nonzero).sum())
    keep = np.flatnonzero(nonzero)
    return FeatureSet([pairs[i] for i in keep], raw[keep], vectors[keep], excluded)


def unit_rows(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ContractError("zero vectors cannot be clustered by cosine similarity")
    return X / norms[:, None]


def cluster_sums(U: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, U.shape[1]))
    np.add.at(sums, labels, U)
    return sums


def criterion(X: np.ndarray, labels: np.ndarray, k: int | None = None) -> float:
    """Sum over clusters of the square root of summed pairwise cosine similarity."""
    U = unit_rows(X)
    k = int(labels.max()) + 1 if k is None else k
    return float(np.linalg.norm(cluster_sums(U, labels, k), axis=1).sum())


@dataclass(frozen=True)
class ClusterModel:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    criterion_value: float
    seed: int
    restart: int
    n_iter: int
    history: tuple[float, ...]
    pairs: list[Pair] | None = None

    @property
    def assignments(self) -> dict[Pair, int]:
        if self.pairs is None:
            raise AttributeError("model was fitted on a bare array; no pair keys")
        return dict(zip(self.pairs, (int(c) for c in self.labels)))

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


def _seed_centroids(U: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding with cosine distance ``1 - cos``."""
    n = U.shape[0]
    chosen = [int(rng.integers(n))]
    closest = 1.0 - U @ U[chosen[0]]
    for _ in range(1, k):
        weights = np.clip(closest, 0.0, None) ** 2
        total = weights.sum()
        if total > 0:
            idx = int(rng.choice(n, p=weights / total))
        else:
            idx = int(np.argmax(closest))
        chosen.append(idx)
        closest = np.minimum(closest, 1.0 - U @ U[idx])
    return U[chosen].copy()


def _repair_empty(U: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> None:
    counts = np.bincount(labels, minlength=k)
    for c in np.flatnonzero(counts == 0):
        own_sim = np.einsum("ij,ij->i", U, centroids[labels])
        movable = counts[labels] >= 2
        own_sim = np.where(movable, own_sim, np.inf)
        i = int(np.argmin(own_sim))
        counts[labels[i]] -= 1
        labels[i] = c
        counts[c] += 1


def _single_run(U: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float):
    centroids = _seed_centroids(U, k, rng)
    labels = None
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new_labels = np.argmax(U @ centroids.T, axis=1)
        _repair_empty(U, new_labels, centroids, k)
        sums = cluster_sums(U, new_labels, k)
        norms = np.linalg.norm(sums, axis=1)
        value = float(norms.sum())
        safe = norms > 0
        centroids = np.where(safe[:, None], sums / np.where(safe, norms, 1.0)[:, None], centroids)
        converged = labels is not None and np.array_equal(new_labels, labels)
        improved = history and value - history[-1] <= tol * max(1.0, abs(value))
        history.append(value)
        labels = new_labels
        if converged or (tol > 0 and improved):
            break
    return labels, centroids, history, n_iter


def kmeans_cosine(
    features: FeatureSet | np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = 0.0,
    n_init: int = DEFAULT_RESTARTS,
    workers: int = 1,
) -> ClusterModel:
    """Spherical K-means, best of ``n_init`` seeded restarts.

    Restart ``r`` draws from the ``r``-th child of ``SeedSequence(seed)``;
    the winner is the largest criterion value, ties going to the lowest
    restart index, so the result does not depend on ``workers``.
    """
    pairs = features.pairs if isinstance(features, FeatureSet) else None
    X = features.vectors if isinstance(features, FeatureSet) else np.asarray(features, dtype=float)
    U = unit_rows(X)
    n = U.shape[0]
    if k < 2 or k > n:
        raise ClusteringError(f"k must be in [2, {n}], got {k}")
    distinct = np.unique(np.round(U, 12), axis=0).shape[0]
    if distinct < k:
        raise ClusteringError(f"degenerate input: {distinct} distinct directions for k={k}")

    children = np.random.SeedSequence(seed).spawn(n_init)

    def run(r: int):
        return _single_run(U, k, np.random.default_rng(children[r]), max_iter, tol)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(run, range(n_init)))
    else:
        runs = [run(r) for r in range(n_init)]

    best = max(range(n_init), key=lambda r: (runs[r][2][-1], -r))
    labels, centroids, history, n_iter = runs[best]
    return ClusterModel(
        k=k,
        labels=labels,
        centroids=centroids,
        criterion_value=history[-1],
        seed=seed,
        restart=best,
        n_iter=n_iter,
        history=tuple(history),
        pairs=pairs,
    )


def silhouette(features: FeatureSet | np.ndarray, labels: np.ndarray | ClusterModel) -> float:
    """Mean silhouette under cosine distance; members of singleton clusters score 0."""
    X = features.vectors if isinstance(features, FeatureSet) else features
    if isinstance(labels, ClusterModel):
        labels = labels.labels
    labels = np.asarray(labels)
    U = unit_rows(X)
    k = int(labels.max()) + 1
    if len(np.unique(labels)) < 2:
        raise ClusteringError("silhouette needs at least two non-empty clusters")
    sums = cluster_sums(U, labels, k)
    sizes = np.bincount(labels, minlength=k).astype(float)
    sims = U @ sums.T  # (n, k): summed similarity to each cluster
    own = labels
    n = U.shape[0]
    own_size = sizes[own]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = 1.0 - (sims[np.arange(n), own] - 1.0) / (own_size - 1.0)
        mean_other = 1.0 - sims / sizes[None, :]
    mean_other[np.arange(n), own] = np.inf
    mean_other[:, sizes == 0] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 0, (b - a) / denom, 0.0)
    s[own_size == 1] = 0.0
    return float(s.mean())


@dataclass(frozen=True)
class ScanPoint:
    k: int
    criterion: float
    silhouette: float
    model: ClusterModel


def stage_seed(seed: int, k: int) -> int:
    """Named sub-seed for the clustering at ``k``."""
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def scan(
    features: FeatureSet | np.ndarray,
    k_range: Sequence[int],
    seed: int = 0,
    n_init: int = DEFAULT_RESTARTS,
    workers: int = 1,
) -> list[ScanPoint]:
    points = []
    for k in k_range:
        model = kmeans_cosine(features, k, seed=stage_seed(seed, k), n_init=n_init, workers=workers)
        points.append(ScanPoint(k, model.criterion_value, silhouette(features, model), model))
    return points


def elbow_scan(features, k_range: Sequence[int], seed: int = 0, n_init: int = DEFAULT_RESTARTS) -> list[tuple[int, float]]:
    return [(p.k, p.criterion) for p in scan(features, k_range, seed, n_init)]


def silhouette_scan(features, k_range: Sequence[int], seed: int = 0, n_init: int = DEFAULT_RESTARTS) -> list[tuple[int, float]]:
    return [(p.k, p.silhouette) for p in scan(features, k_range, seed, n_init)]


@dataclass(frozen=True)
class ClusterStats:
    cluster: int
    label: str
    size: int
    mean_flux: float
    flux_share: float
    mean_travel_time: float
    mean_gdp_product: float


@dataclass(frozen=True)
class PatternLabeling:
    labels: dict[int, str]
    stats: list[ClusterStats]  # ordered I..IV
    checks: dict[str, bool]
    ties: list[tuple[int, int]]

    def label_of(self, pair_cluster: int) -> str:
        return self.labels[pair_cluster]

    def pair_labels(self, model: ClusterModel) -> dict[Pair, str]:
        return {p: self.labels[c] for p, c in model.assignments.items()}


def label_patterns(model: ClusterModel, features: FeatureSet) -> PatternLabeling:
    """Name clusters I..IV by descending mean flux, ties by ascending mean travel time."""
    if model.k != 4:
        raise ContractError(f"pattern labelling needs k=4, got k={model.k}")
    raw = features.raw
    total_flux = raw[:, 2].sum()
    rows = []
    for c in range(4):
        members = raw[model.labels == c]
        rows.append((c, len(members), members[:, 2].mean(), members[:, 2].sum() / total_flux,
                     members[:, 1].mean(), members[:, 0].mean()))
    ordered = sorted(rows, key=lambda r: (-r[2], r[4], r[0]))
    ties = [(int(x[0]), int(y[0])) for x, y in zip(ordered, ordered[1:]) if x[2] == y[2]]
    labels = {r[0]: PATTERN_LABELS[i] for i, r in enumerate(ordered)}
    stats = [ClusterStats(r[0], labels[r[0]], r[1], *(float(x) for x in r[2:])) for r in ordered]
    times = [s.mean_travel_time for s in stats]
    gdps = [s.mean_gdp_product for s in stats]
    checks = {
        "pattern_I_least_travel_time": bool(times[0] == min(times)),
        "pattern_II_highest_gdp_among_II_IV": bool(gdps[1] == max(gdps[1:])),
        "pattern_IV_longest_travel_time": bool(times[3] == max(times)),
    }
    return PatternLabeling(labels, stats, checks, ties)


def fit_per_pattern(
    pair_labels: Mapping[Pair, str],
    flux: FluxMatrix,
    attrs: Mapping[str, CityAttributes],
    travel_time: CostMatrix,
) -> dict[str, CellResult]:
    """G-GM travel-time fit restricted to each pattern's pairs, plus ``All``."""
    spec = ModelSpec(Family.G_GM, travel_time.metric)
    out = {"All": fit_flux(spec, flux.restrict(pair_labels), attrs, travel_time)}
    for label in sorted(set(pair_labels.values()), key=_label_key):
        subset = flux.restrict(p for p, lab in pair_labels.items() if lab == label)
        out[label] = fit_flux(spec, subset, attrs, travel_time)
    return out


def _label_key(label: str):
    return (PATTERN_LABELS.index(label), label) if label in PATTERN_LABELS else (len(PATTERN_LABELS), label)


def write_scan(points: Sequence[tuple[int, float]], out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("k", "score"))
    for k, v in points:
        writer.writerow((k, repr(float(v))))


def write_assignments(model: ClusterModel, labeling: PatternLabeling | None, out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("city_a", "city_b", "cluster", "pattern_label"))
    for (a, b), c in sorted(model.assignments.items()):
        writer.writerow((a, b, c, labeling.labels[c] if labeling else ""))


def read_assignments(path) -> dict[Pair, str]:
    from .ingest import _skip_comments

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(_skip_comments(fh))
        return {(r["city_a"], r["city_b"]): r["pattern_label"] for r in reader}
