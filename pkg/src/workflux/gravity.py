"""Gravity-law models of migration flux.

Four variants share the form ``F = a * m_i**alpha * m_j**beta / C**gamma``:

* ``GM``       masses are populations, alpha = beta = 1
* ``G_GM``     masses are GDP, alpha = beta = 1
* ``AVEG_GM``  masses are GDP per capita, alpha = beta = 1
* ``DIRG_GM``  directed flux, masses are origin/destination GDP, alpha and beta free

Parameters are estimated by ordinary least squares on the log-linearised
model. Cost enters through a negated regressor so a positive gamma means
cost suppresses flux.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from .errors import ContractError, DataError, FitError, WorkfluxError
from .geo import METRICS, CityAttributes, CostMatrix
from .ingest import FluxMatrix, Pair


class Family(str, Enum):
    GM = "GM"
    G_GM = "G_GM"
    AVEG_GM = "AVEG_GM"
    DIRG_GM = "DIRG_GM"

    @property
    def mass_source(self) -> str:
        return {"GM": "population", "AVEG_GM": "gdp_per_capita"}.get(self.value, "gdp")

    @property
    def directed(self) -> bool:
        return self is Family.DIRG_GM

    @property
    def constrained(self) -> bool:
        return self is not Family.DIRG_GM


FAMILIES = tuple(Family)


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    cost_metric: str = "travel_min"

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.cost_metric not in METRICS:
            raise ValueError(f"unknown cost metric {self.cost_metric!r}")

    @property
    def mass_source(self) -> str:
        return self.family.mass_source


@dataclass(frozen=True)
class RegressionTable:
    """Log-space design for one model.

    ``mass`` holds ``log(m_i * m_j)`` (one column) for the constrained
    families and ``(log m_origin, log m_destination)`` for DIRG_GM.
    """

    spec: ModelSpec
    pairs: list[Pair]
    response: np.ndarray
    mass: np.ndarray
    neg_log_cost: np.ndarray
    excluded: dict[str, int] = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return len(self.pairs)

    @property
    def n_excluded(self) -> int:
        return sum(self.excluded.values())

    @property
    def regressors(self) -> np.ndarray:
        return np.column_stack([self.mass, self.neg_log_cost])

    def subset(self, pairs: Iterable[Pair]) -> "RegressionTable":
        keep = set(pairs)
        idx = np.array([i for i, p in enumerate(self.pairs) if p in keep], dtype=int)
        return RegressionTable(
            self.spec, [self.pairs[i] for i in idx], self.response[idx],
            self.mass[idx], self.neg_log_cost[idx], dict(self.excluded),
        )


def _mass(city: CityAttributes, source: str) -> float:
    return getattr(city, source)


def design_rows(
    spec: ModelSpec,
    flux: FluxMatrix,
    attrs: Mapping[str, CityAttributes],
    costs: CostMatrix,
) -> RegressionTable:
    if spec.family.directed and not flux.directed:
        raise ContractError("directed flux required for DIRG_GM")
    if not spec.family.directed and flux.directed:
        raise ContractError(f"undirected flux required for {spec.family.value}")
    if costs.metric != spec.cost_metric:
        raise ContractError(f"cost matrix metric {costs.metric} does not match model metric {spec.cost_metric}")

    pairs, y, mass, nlc = [], [], [], []
    excluded = {"missing_cost": 0, "missing_attributes": 0}
    for (a, b), count in flux.items():
        if a not in attrs or b not in attrs:
            excluded["missing_attributes"] += 1
            continue
        cost = costs.get(a, b)
        if cost is None:
            excluded["missing_cost"] += 1
            continue
        ma, mb = _mass(attrs[a], spec.mass_source), _mass(attrs[b], spec.mass_source)
        if ma <= 0 or mb <= 0 or cost <= 0 or count <= 0:
            raise DataError(f"nonpositive mass, cost or flux for pair ({a}, {b})")
        pairs.append((a, b))
        y.append(math.log(count))
        if spec.family.directed:
            mass.append((math.log(ma), math.log(mb)))
        else:
            mass.append((math.log(ma) + math.log(mb),))
        nlc.append(-math.log(cost))
    width = 2 if spec.family.directed else 1
    return RegressionTable(
        spec=spec,
        pairs=pairs,
        response=np.asarray(y, dtype=float),
        mass=np.asarray(mass, dtype=float).reshape(len(pairs), width),
        neg_log_cost=np.asarray(nlc, dtype=float),
        excluded=excluded,
    )


@dataclass(frozen=True)
class GravityFit:
    spec: ModelSpec
    log_a: float
    alpha: float
    beta: float
    gamma: float
    n_obs: int
    r_squared: float
    f_statistic: float
    f_pvalue: float
    coef_names: tuple[str, ...]
    coef: tuple[float, ...]
    coef_stderr: tuple[float, ...]
    coef_t: tuple[float, ...]
    coef_p: tuple[float, ...]
    n_excluded: int = 0
    pvalue_method: str = "normal"
    log_base: str = "e"

    @property
    def a(self) -> float:
        return math.exp(self.log_a)

    def p_of(self, name: str) -> float:
        return self.coef_p[self.coef_names.index(name)]


def _ols(X: np.ndarray, y: np.ndarray):
    n, p = X.shape
    if n <= p:
        raise FitError(f"need more observations ({n}) than parameters ({p})")
    if np.linalg.matrix_rank(X) < p:
        raise FitError("collinear regressors")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    return beta, resid


def fit(spec: ModelSpec, table: RegressionTable) -> GravityFit:
    """Least-squares fit in log space with classical OLS diagnostics.

    For the constrained families the mass term has a fixed unit coefficient,
    so it is subtracted from the response and only ``(log a, gamma)`` are
    estimated. p-values use the normal approximation to the t distribution.
    """
    if table.spec.family is not spec.family:
        raise ContractError("regression table was built for a different family")
    n = table.n_obs
    ones = np.ones(n)
    if spec.family.constrained:
        y = table.response - table.mass[:, 0]
        X = np.column_stack([ones, table.neg_log_cost])
        names = ("log_a", "gamma")
    else:
        y = table.response
        X = np.column_stack([ones, table.mass, table.neg_log_cost])
        names = ("log_a", "alpha", "beta", "gamma")
    coef, resid = _ols(X, y)

    p = X.shape[1]
    df_resid = n - p
    sse = float(resid @ resid)
    centered = y - y.mean()
    sst = float(centered @ centered)
    if sst > 0:
        r2 = min(1.0, max(0.0, 1.0 - sse / sst))
    else:
        r2 = 1.0 if sse == 0 else 0.0

    sigma2 = sse / df_resid
    xtx_inv = np.linalg.inv(X.T @ X)
    stderr = np.sqrt(np.clip(np.diag(xtx_inv) * sigma2, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / stderr
        f_stat = ((sst - sse) / (p - 1)) / sigma2
    t = np.where(stderr == 0, np.where(coef == 0, np.nan, np.sign(coef) * np.inf), t)
    pvals = 2.0 * stats.norm.sf(np.abs(t))
    if sigma2 == 0:
        f_stat = math.inf if sst > 0 else math.nan
    f_p = float(stats.f.sf(f_stat, p - 1, df_resid)) if not math.isnan(f_stat) else math.nan

    values = dict(zip(names, coef))
    return GravityFit(
        spec=spec,
        log_a=float(values["log_a"]),
        alpha=float(values.get("alpha", 1.0)),
        beta=float(values.get("beta", 1.0)),
        gamma=float(values["gamma"]),
        n_obs=n,
        r_squared=r2,
        f_statistic=float(f_stat),
        f_pvalue=f_p,
        coef_names=names,
        coef=tuple(float(c) for c in coef),
        coef_stderr=tuple(float(s) for s in stderr),
        coef_t=tuple(float(v) for v in t),
        coef_p=tuple(float(v) for v in pvals),
        n_excluded=table.n_excluded,
    )


def significance_stars(p: float) -> str:
    if math.isnan(p):
        return ""
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


@dataclass(frozen=True)
class Prediction:
    spec: ModelSpec
    entries: dict[Pair, float]
    errors: dict[Pair, str] = field(default_factory=dict)


def predict_one(fit: GravityFit, mass_i: float, mass_j: float, cost: float) -> float:
    return math.exp(fit.log_a + fit.alpha * math.log(mass_i) + fit.beta * math.log(mass_j)
                    - fit.gamma * math.log(cost))


def predict(
    fit: GravityFit,
    pairs: Iterable[Pair],
    attrs: Mapping[str, CityAttributes],
    costs: CostMatrix,
) -> Prediction:
    source = fit.spec.mass_source
    entries, errors = {}, {}
    for a, b in pairs:
        if a not in attrs or b not in attrs:
            errors[(a, b)] = "missing attributes"
            continue
        cost = costs.get(a, b)
        if cost is None:
            errors[(a, b)] = "missing cost"
            continue
        entries[(a, b)] = predict_one(fit, _mass(attrs[a], source), _mass(attrs[b], source), cost)
    return Prediction(fit.spec, entries, errors)


def _as_mapping(x) -> Mapping[Pair, float]:
    return x.entries if hasattr(x, "entries") else x


def ssi(actual, predicted) -> float:
    """Sorensen similarity ``2 * sum(min(F, F_hat)) / (sum(F) + sum(F_hat))``.

    Both arguments are pair-keyed mappings (or objects with ``.entries``)
    over the same pair set.
    """
    act, pred = _as_mapping(actual), _as_mapping(predicted)
    if act.keys() != pred.keys():
        raise ContractError("actual and predicted flux must cover the same pair set")
    keys = list(act)
    f = np.fromiter((act[k] for k in keys), dtype=float, count=len(keys))
    g = np.fromiter((pred[k] for k in keys), dtype=float, count=len(keys))
    denom = f.sum() + g.sum()
    if denom == 0:
        raise ValueError("SSI undefined: both flux sums are zero")
    return float(2.0 * np.minimum(f, g).sum() / denom)


@dataclass(frozen=True)
class CellResult:
    family: Family
    metric: str
    fit: GravityFit | None = None
    ssi: float | None = None
    prediction: Prediction | None = None
    actual: Mapping[Pair, float] | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def fit_flux(
    spec: ModelSpec,
    flux: FluxMatrix,
    attrs: Mapping[str, CityAttributes],
    costs: CostMatrix,
) -> CellResult:
    """Design, fit, predict and score one model; errors land in the result."""
    try:
        table = design_rows(spec, flux, attrs, costs)
        result = fit(spec, table)
        pred = predict(result, table.pairs, attrs, costs)
        actual = {p: flux.entries[p] for p in table.pairs}
        score = ssi(actual, pred)
    except (WorkfluxError, ValueError) as exc:
        return CellResult(spec.family, spec.cost_metric, error=str(exc))
    return CellResult(spec.family, spec.cost_metric, result, score, pred, actual)


def compare_models(
    directed: FluxMatrix | None,
    undirected: FluxMatrix | None,
    attrs: Mapping[str, CityAttributes],
    costs: Mapping[str, CostMatrix | None],
    families: Sequence[Family] = FAMILIES,
    metrics: Sequence[str] = METRICS,
) -> list[CellResult]:
    """Fit every (family, metric) cell; a failing cell does not stop the others."""
    cells = []
    for metric in metrics:
        for family in families:
            flux = directed if Family(family).directed else undirected
            cost = costs.get(metric)
            if flux is None:
                kind = "directed" if Family(family).directed else "undirected"
                cells.append(CellResult(Family(family), metric, error=f"no {kind} flux supplied"))
            elif cost is None:
                cells.append(CellResult(Family(family), metric, error=f"no {metric} cost table supplied"))
            else:
                cells.append(fit_flux(ModelSpec(family, metric), flux, attrs, cost))
    return cells


FIT_COLUMNS = ("family", "metric", "alpha", "beta", "gamma", "log_a", "r2", "f_stat", "f_pvalue", "f_stars", "n_obs", "ssi", "error")


def _num(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def write_fit_table(cells: Sequence[CellResult], out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(FIT_COLUMNS)
    for c in cells:
        f = c.fit
        if f is None:
            writer.writerow((c.family.value, c.metric, *[""] * (len(FIT_COLUMNS) - 3), c.error))
        else:
            writer.writerow((c.family.value, c.metric, _num(f.alpha), _num(f.beta), _num(f.gamma),
                             _num(f.log_a), _num(f.r_squared), _num(f.f_statistic), _num(f.f_pvalue),
                             significance_stars(f.f_pvalue), f.n_obs,
                             _num(c.ssi), ""))


def write_prediction(cell: CellResult, out) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("origin", "destination", "actual", "predicted"))
    for pair in sorted(cell.prediction.entries):
        writer.writerow((pair[0], pair[1], _num(cell.actual[pair]), _num(cell.prediction.entries[pair])))
