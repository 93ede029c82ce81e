import math

import numpy as np
import pytest
import statsmodels.api as sm
from hypothesis import given, strategies as st

from oracles import normal_equations, ssi_loop
from workflux.errors import ContractError, FitError
from workflux.geo import CityAttributes, CostMatrix
from workflux.gravity import (
    FAMILIES,
    Family,
    GravityFit,
    ModelSpec,
    compare_models,
    design_rows,
    fit,
    predict,
    ssi,
)
from workflux.ingest import FluxMatrix
from workflux.synth import gravity_flux, random_cities, random_costs, random_pairs


def city(cid, gdp=1.0, pop=1.0, pc=1.0):
    return CityAttributes(cid, cid, 0.0, 0.0, gdp, pc, pop, "p")


def synthetic(family, seed, n_pairs=200, sigma=0.0, log_a=0.0, alpha=1.0, beta=1.0, gamma=0.5, n_cities=40):
    rng = np.random.default_rng(seed)
    cities = random_cities(n_cities, rng)
    family = Family(family)
    pairs = random_pairs(cities, n_pairs, rng, directed=family.directed)
    costs = random_costs(pairs, "travel_min", rng)
    flux = gravity_flux(family, cities, costs, pairs, log_a, alpha, beta, gamma, sigma, rng)
    return cities, costs, flux


def make_fit(log_a=0.0, alpha=1.0, beta=1.0, gamma=0.0, family=Family.G_GM):
    return GravityFit(ModelSpec(family), log_a, alpha, beta, gamma, 0, 1.0, math.inf, 0.0,
                      (), (), (), (), ())


def test_design_row_unit_logs():
    cities = {"A": city("A", gdp=math.e), "B": city("B", gdp=1.0)}
    costs = CostMatrix("travel_min", {("A", "B"): math.e})
    flux = FluxMatrix(False, {("A", "B"): 7})
    table = design_rows(ModelSpec(Family.G_GM), flux, cities, costs)
    assert table.response[0] == pytest.approx(math.log(7))
    np.testing.assert_allclose(table.regressors[0], [1.0, -1.0])


def test_design_rows_mass_sources():
    cities = {"A": city("A", gdp=2.0, pop=3.0, pc=5.0), "B": city("B", gdp=7.0, pop=11.0, pc=13.0)}
    costs = CostMatrix("travel_min", {("A", "B"): 2.0})
    und = FluxMatrix(False, {("A", "B"): 4})
    for fam, product in ((Family.GM, 33.0), (Family.G_GM, 14.0), (Family.AVEG_GM, 65.0)):
        table = design_rows(ModelSpec(fam), und, cities, costs)
        assert table.mass[0, 0] == pytest.approx(math.log(product))
    directed = FluxMatrix(True, {("B", "A"): 4})
    table = design_rows(ModelSpec(Family.DIRG_GM), directed, cities, costs)
    np.testing.assert_allclose(table.mass[0], [math.log(7.0), math.log(2.0)])


def test_dirg_requires_directed():
    cities = {"A": city("A"), "B": city("B")}
    with pytest.raises(ContractError, match="directed flux required"):
        design_rows(ModelSpec(Family.DIRG_GM), FluxMatrix(False, {("A", "B"): 1}),
                    cities, CostMatrix("travel_min", {("A", "B"): 1.0}))


def test_missing_cost_pair_excluded():
    cities = {c: city(c) for c in "ABC"}
    flux = FluxMatrix(False, {("A", "B"): 1, ("A", "C"): 2})
    table = design_rows(ModelSpec(Family.G_GM), flux, cities, CostMatrix("travel_min", {("A", "B"): 1.0}))
    assert table.n_obs == 1
    assert table.excluded["missing_cost"] == 1


@pytest.mark.parametrize("family", FAMILIES)
def test_exact_recovery(family):
    params = dict(log_a=-1.3, alpha=0.8, beta=1.2, gamma=0.5) if family is Family.DIRG_GM else dict(log_a=0.0, gamma=0.5)
    cities, costs, flux = synthetic(family, seed=1, **params)
    res = fit(ModelSpec(family), design_rows(ModelSpec(family), flux, cities, costs))
    assert res.gamma == pytest.approx(0.5, rel=1e-9)
    assert res.log_a == pytest.approx(params["log_a"], rel=1e-9, abs=1e-9)
    assert res.alpha == pytest.approx(params.get("alpha", 1.0), rel=1e-9)
    assert res.beta == pytest.approx(params.get("beta", 1.0), rel=1e-9)
    assert res.r_squared == pytest.approx(1.0, abs=1e-9)
    assert res.n_obs == 200


def test_noisy_recovery_over_seeds():
    for seed in range(30):
        cities, costs, flux = synthetic(Family.G_GM, seed=seed, sigma=0.1)
        res = fit(ModelSpec(Family.G_GM), design_rows(ModelSpec(Family.G_GM), flux, cities, costs))
        assert abs(res.gamma - 0.5) <= 0.02, seed


def test_diagnostics_match_statsmodels():
    cities, costs, flux = synthetic(Family.DIRG_GM, seed=4, sigma=0.3, alpha=0.9, beta=0.95, gamma=0.4)
    spec = ModelSpec(Family.DIRG_GM)
    table = design_rows(spec, flux, cities, costs)
    res = fit(spec, table)
    ref = sm.OLS(table.response, sm.add_constant(table.regressors)).fit()
    np.testing.assert_allclose(res.coef, ref.params, rtol=1e-9)
    np.testing.assert_allclose(res.coef_stderr, ref.bse, rtol=1e-8)
    assert res.r_squared == pytest.approx(ref.rsquared, rel=1e-9)
    assert res.f_statistic == pytest.approx(ref.fvalue, rel=1e-8)
    assert res.f_pvalue == pytest.approx(ref.f_pvalue, rel=1e-6, abs=1e-300)


def test_constrained_diagnostics_use_offset_regression():
    cities, costs, flux = synthetic(Family.GM, seed=5, sigma=0.3)
    spec = ModelSpec(Family.GM)
    table = design_rows(spec, flux, cities, costs)
    res = fit(spec, table)
    y = table.response - table.mass[:, 0]
    ref = sm.OLS(y, sm.add_constant(table.neg_log_cost)).fit()
    np.testing.assert_allclose(res.coef, ref.params, rtol=1e-9)
    assert res.r_squared == pytest.approx(ref.rsquared, rel=1e-9)
    assert res.f_statistic == pytest.approx(ref.fvalue, rel=1e-8)
    assert res.pvalue_method == "normal"


@pytest.mark.parametrize("seed", range(20))
def test_matches_normal_equations_small(seed):
    rng = np.random.default_rng(100 + seed)
    family = FAMILIES[seed % 4]
    n_rows = int(rng.integers(6, 11))
    cities, costs, flux = synthetic(family, seed=200 + seed, n_pairs=n_rows, sigma=0.5, n_cities=8,
                                    alpha=0.7, beta=1.1, gamma=0.3)
    spec = ModelSpec(family)
    table = design_rows(spec, flux, cities, costs)
    res = fit(spec, table)
    ones = np.ones(table.n_obs)
    if family.constrained:
        expected = normal_equations(np.column_stack([ones, table.neg_log_cost]), table.response - table.mass[:, 0])
    else:
        expected = normal_equations(np.column_stack([ones, table.mass, table.neg_log_cost]), table.response)
    np.testing.assert_allclose(res.coef, expected, rtol=1e-10, atol=1e-10)


def test_cost_scale_covariance():
    cities, costs, flux = synthetic(Family.G_GM, seed=6, gamma=0.7)
    spec = ModelSpec(Family.G_GM)
    base = fit(spec, design_rows(spec, flux, cities, costs))
    k = 60.0
    scaled = fit(spec, design_rows(spec, flux, cities, costs.scaled(k)))
    assert scaled.gamma == pytest.approx(base.gamma, rel=1e-9)
    assert scaled.log_a == pytest.approx(base.log_a + base.gamma * math.log(k), abs=1e-9)


def test_collinear_and_too_few_rows():
    cities = {c: city(c, gdp=2.0) for c in "ABCD"}
    flux = FluxMatrix(True, {("A", "B"): 1, ("B", "C"): 2, ("C", "D"): 3, ("D", "A"): 5, ("A", "C"): 4})
    costs = CostMatrix("travel_min", {("A", "B"): 1.0, ("B", "C"): 2.0, ("C", "D"): 3.0, ("A", "D"): 4.0,
                                      ("A", "C"): 5.0})
    spec = ModelSpec(Family.DIRG_GM)
    with pytest.raises(FitError, match="collinear"):
        fit(spec, design_rows(spec, flux, cities, costs))
    spec = ModelSpec(Family.G_GM)
    und = FluxMatrix(False, {("A", "B"): 1, ("B", "C"): 2})
    with pytest.raises(FitError):
        fit(spec, design_rows(spec, und, cities, costs))


def test_predict_examples():
    cities = {"A": city("A", gdp=2.0), "B": city("B", gdp=3.0)}
    costs = CostMatrix("travel_min", {("A", "B"): 6.0})
    assert predict(make_fit(gamma=0.0), [("A", "B")], cities, costs).entries[("A", "B")] == pytest.approx(6.0)
    assert predict(make_fit(gamma=1.0), [("A", "B")], cities, costs).entries[("A", "B")] == pytest.approx(1.0)


def test_predict_missing_cost_is_reported():
    cities = {c: city(c) for c in "ABC"}
    pred = predict(make_fit(), [("A", "B"), ("A", "C")], cities, CostMatrix("travel_min", {("A", "B"): 1.0}))
    assert set(pred.entries) == {("A", "B")}
    assert pred.errors == {("A", "C"): "missing cost"}


@pytest.mark.parametrize("family", FAMILIES)
def test_predict_round_trip(family):
    cities, costs, flux = synthetic(family, seed=7, alpha=0.6, beta=1.4, gamma=0.9)
    spec = ModelSpec(family)
    res = fit(spec, design_rows(spec, flux, cities, costs))
    pred = predict(res, flux.entries, cities, costs)
    for pair, value in flux.items():
        assert pred.entries[pair] == pytest.approx(value, rel=1e-9)


def test_ssi_examples():
    act = {("A", "B"): 10.0}
    assert ssi(act, act) == 1.0
    assert ssi(act, {("A", "B"): 5.0}) == pytest.approx(2 * 5 / 15)
    assert ssi(act, {("A", "B"): 0.0}) == 0.0
    with pytest.raises(ValueError):
        ssi({("A", "B"): 0.0}, {("A", "B"): 0.0})
    with pytest.raises(ContractError):
        ssi(act, {("A", "C"): 1.0})


flux_maps = st.dictionaries(
    st.tuples(st.sampled_from("ABCD"), st.sampled_from("EFGH")),
    st.tuples(st.floats(0.0, 1e6), st.floats(0.0, 1e6)),
    min_size=1,
)


@given(flux_maps)
def test_ssi_properties(values):
    a = {k: v[0] for k, v in values.items()}
    b = {k: v[1] for k, v in values.items()}
    if sum(a.values()) + sum(b.values()) == 0:
        return
    s = ssi(a, b)
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(ssi(b, a), rel=1e-12, abs=1e-15)
    assert s == pytest.approx(ssi_loop(a, b), rel=1e-9, abs=1e-12)
    if sum(a.values()) > 0:
        assert ssi(a, a) == pytest.approx(1.0, rel=1e-12)


def _all_metric_costs(costs):
    return {m: CostMatrix(m, dict(costs.entries)) for m in ("geo_km", "travel_km", "travel_min")}


def test_compare_models_prefers_generating_family():
    rng = np.random.default_rng(8)
    cities = random_cities(40, rng)
    pairs = random_pairs(cities, 300, rng)
    costs = random_costs(pairs, "travel_min", rng)
    und = gravity_flux(Family.G_GM, cities, costs, pairs, log_a=2.0, gamma=0.5, sigma=0.2, rng=rng)
    directed = FluxMatrix(True, {**{p: v / 2 for p, v in und.items()},
                                 **{(b, a): v / 2 for (a, b), v in und.items()}})
    other = {"travel_km": random_costs(pairs, "travel_km", rng), "geo_km": random_costs(pairs, "geo_km", rng),
             "travel_min": costs}
    cells = compare_models(directed, und, cities, other)
    assert len(cells) == 12 and all(c.ok for c in cells)
    tt = {c.family: c.ssi for c in cells if c.metric == "travel_min"}
    assert tt[Family.G_GM] > tt[Family.GM]
    assert tt[Family.G_GM] > tt[Family.AVEG_GM]
    assert tt[Family.G_GM] >= tt[Family.DIRG_GM] - 0.01
    best_other_metric = max(c.ssi for c in cells if c.family is Family.G_GM and c.metric != "travel_min")
    assert tt[Family.G_GM] > best_other_metric


def test_compare_models_identical_attrs_tie():
    rng = np.random.default_rng(9)
    cities = {f"C{i}": city(f"C{i}", gdp=5.0, pop=5.0, pc=5.0) for i in range(20)}
    pairs = random_pairs(cities, 80, rng)
    costs = random_costs(pairs, "travel_min", rng)
    und = gravity_flux(Family.G_GM, cities, costs, pairs, gamma=0.0, sigma=0.2, rng=rng)
    cells = compare_models(None, und, cities, {"travel_min": costs},
                           families=(Family.GM, Family.G_GM, Family.AVEG_GM), metrics=("travel_min",))
    scores = [c.ssi for c in cells]
    assert max(scores) - min(scores) < 1e-12
    # with identical masses the directed design has a constant mass column
    dcells = compare_models(FluxMatrix(True, dict(und.entries)), und, cities, {"travel_min": costs},
                            families=(Family.DIRG_GM,), metrics=("travel_min",))
    assert dcells[0].error == "collinear regressors"


def test_compare_models_missing_table_marks_cells():
    cities, costs, flux = synthetic(Family.G_GM, seed=10)
    cells = compare_models(None, flux, cities, {"geo_km": CostMatrix("geo_km", dict(costs.entries)),
                                                "travel_km": CostMatrix("travel_km", dict(costs.entries)),
                                                "travel_min": None})
    errored = [(c.family, c.metric) for c in cells if not c.ok]
    assert all(m == "travel_min" or f is Family.DIRG_GM for f, m in errored)
    assert sum(1 for c in cells if c.ok) == 6
