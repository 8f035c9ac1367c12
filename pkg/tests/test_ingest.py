import datetime as dt

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weeklymort.ingest import (WEEKS_PER_YEAR, AnnualPopulation, DuplicateKeyError,
                               GriddedDaily, SchemaError, aggregate_temperature,
                               ili_anomaly, ili_thresholds, interpolate_exposure,
                               iso_week_start, load_csv_inputs, n_iso_weeks)
from weeklymort.synthetic import SynthConfig, generate, write_csv_inputs


def pop_const(c=1000.0, years=(2001, 2002, 2003)):
    return AnnualPopulation(("a",), years, ("r",), np.full((1, len(years), 1), c))


def test_constant_population_gives_constant_exposure():
    E = interpolate_exposure(pop_const(), [2001, 2002])
    np.testing.assert_allclose(E, 1000.0 / WEEKS_PER_YEAR, rtol=1e-14)
    # the year total is off from c by exactly the 52/52.18 normalization
    assert E[0, 0, :, 0].sum() == pytest.approx(52 * 1000.0 / WEEKS_PER_YEAR, rel=1e-14)


def test_midyear_interpolation_by_hand():
    pop = AnnualPopulation(("a",), (2001, 2002, 2003), ("r",),
                           np.array([[[100.0], [200.0], [300.0]]]))
    # ISO week 27 of 2001 starts on 2 July, day 182 of a 365-day year
    assert iso_week_start(2001, 27) == dt.date(2001, 7, 2)
    p27 = 100 + 182 / 365 * 100
    p28 = 100 + 189 / 365 * 100
    assert p27 == pytest.approx(149.86, abs=0.005)
    E = interpolate_exposure(pop, [2001])
    assert E[0, 0, 26, 0] == pytest.approx((p27 + p28) / (2 * WEEKS_PER_YEAR), rel=1e-14)


def test_last_week_uses_first_week_of_next_year():
    pop = AnnualPopulation(("a",), (2001, 2002, 2003), ("r",),
                           np.array([[[100.0], [200.0], [300.0]]]))
    E = interpolate_exposure(pop, [2001])
    s52 = iso_week_start(2001, 52)
    s1 = iso_week_start(2002, 1)       # 31 Dec 2001, interpolated on the 2002 segment
    p52 = 100 + (s52 - dt.date(2001, 1, 1)).days / 365 * 100
    p1 = 200 + (s1 - dt.date(2002, 1, 1)).days / 365 * 100
    assert E[0, 0, 51, 0] == pytest.approx((p52 + p1) / (2 * WEEKS_PER_YEAR), rel=1e-14)


def test_week53_folded_into_52():
    assert n_iso_weeks(2004) == 53
    E = interpolate_exposure(pop_const(years=(2004, 2005)), [2004])
    assert E[0, 0, 51, 0] == pytest.approx(2 * 1000 / WEEKS_PER_YEAR)


def test_missing_next_year_population():
    with pytest.raises(ValueError):
        interpolate_exposure(pop_const(years=(2001, 2002)), [2001, 2002])


def grid_for(year, weights, temps, regions=None):
    start = iso_week_start(year, 1)
    stop = iso_week_start(year + 1, 1)
    dates = np.arange(np.datetime64(start), np.datetime64(stop))
    values = np.tile(np.asarray(temps, float), (dates.size, 1))
    regions = regions or ("r",) * len(weights)
    return GriddedDaily(tuple(f"c{i}" for i in range(len(weights))), tuple(regions),
                        np.asarray(weights, float), dates, values)


def test_weighted_temperature_by_hand():
    regs, tavg = aggregate_temperature(grid_for(2001, [3, 1], [10, 20]), [2001])
    assert regs == ("r",)
    np.testing.assert_allclose(tavg, 12.5)


def test_single_cell_region_is_weekly_mean():
    g = grid_for(2001, [1.0], [0.0])
    vals = np.arange(g.dates.size, dtype=float)[:, None]
    g = GriddedDaily(g.cell_ids, g.cell_regions, g.weights, g.dates, vals)
    _, tavg = aggregate_temperature(g, [2001])
    np.testing.assert_allclose(tavg[0, :, 0], vals[:364, 0].reshape(52, 7).mean(axis=1))


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0))
def test_weight_rescaling_invariance(scale):
    rng = np.random.default_rng(0)
    g = grid_for(2001, [1.0, 2.0, 0.5], [0, 0, 0], regions=("a", "a", "b"))
    vals = rng.normal(10, 5, g.values.shape)
    g1 = GriddedDaily(g.cell_ids, g.cell_regions, g.weights, g.dates, vals)
    w2 = g.weights.copy()
    w2[:2] *= scale
    g2 = GriddedDaily(g.cell_ids, g.cell_regions, w2, g.dates, vals)
    np.testing.assert_allclose(aggregate_temperature(g1, [2001])[1],
                               aggregate_temperature(g2, [2001])[1], rtol=1e-12)


def test_zero_weight_region_and_missing_day():
    with pytest.raises(ValueError):
        aggregate_temperature(grid_for(2001, [0.0], [1.0]), [2001])
    g = grid_for(2001, [1.0], [1.0])
    g = GriddedDaily(g.cell_ids, g.cell_regions, g.weights, g.dates[1:], g.values[1:])
    with pytest.raises(ValueError, match="missing days"):
        aggregate_temperature(g, [2001])


def test_ili_type7_hand_case():
    ili = np.zeros((10, 52, 1))
    ili[-1] = 100.0
    thr = ili_thresholds(ili, range(10))
    np.testing.assert_allclose(thr, 10.0)
    an = ili_anomaly(ili)
    np.testing.assert_allclose(an[-1], 90.0)
    np.testing.assert_allclose(an[:-1], 0.0)


def test_ili_constant_and_below():
    np.testing.assert_array_equal(ili_anomaly(np.full((12, 52, 2), 3.0)), 0.0)
    ili = np.random.default_rng(0).uniform(0, 1, (12, 52, 2))
    assert np.all(ili_anomaly(ili, thresholds=np.full((52, 2), 5.0)) == 0)


def test_ili_exceedance_share():
    ili = np.random.default_rng(3).gamma(2.0, 10.0, (20, 52, 3))
    an = ili_anomaly(ili)
    assert np.all(an >= 0)
    zero_share = (an == 0).mean(axis=0)
    assert np.all((zero_share >= 0.85) & (zero_share <= 0.95))


def write_minimal(tmp_path, drop_week=None, dup=False):
    rows = [("r", y, w, "a", 5) for y in (2001, 2002) for w in range(1, 53)]
    if drop_week is not None:
        rows = [r for r in rows if (r[1], r[2]) != drop_week]
    if dup:
        rows.append(rows[0])
    pd.DataFrame(rows, columns=["region", "year", "isoweek", "age_group", "deaths"]).to_csv(
        tmp_path / "deaths.csv", index=False)
    pd.DataFrame([("r", y, "a", 1e5) for y in (2001, 2002, 2003)],
                 columns=["region", "year", "age_group", "population"]).to_csv(
        tmp_path / "population.csv", index=False)
    pd.DataFrame([("r", y, w, 1.0, 2.0) for y in (2001, 2002) for w in range(1, 53)],
                 columns=["region", "year", "isoweek", "tavg_c", "ili_rate"]).to_csv(
        tmp_path / "covariates.csv", index=False)
    pd.DataFrame(columns=["region_a", "region_b"]).to_csv(tmp_path / "adjacency.csv",
                                                          index=False)
    return {k: str(tmp_path / f"{k}.csv")
            for k in ("deaths", "population", "covariates", "adjacency")}


def test_minimal_fixture(tmp_path):
    panel, covs, graph, pop, report = load_csv_inputs(write_minimal(tmp_path))
    assert panel.deaths.size == 104
    assert report.ok
    assert graph.adjacency.shape == (1, 1)


def test_duplicate_key(tmp_path):
    with pytest.raises(DuplicateKeyError):
        load_csv_inputs(write_minimal(tmp_path, dup=True))


def test_missing_death_week_imputed(tmp_path):
    panel, *_, report = load_csv_inputs(write_minimal(tmp_path, drop_week=(2002, 7)))
    assert panel.deaths[0, 1, 6, 0] == 0
    assert report.codes() == ["deaths_imputed_zero"]
    assert report.errors() == []


def test_schema_error_reports_lines(tmp_path):
    paths = write_minimal(tmp_path)
    df = pd.read_csv(paths["deaths"]).astype({"deaths": object})
    df.loc[3, "deaths"] = "x"
    df.to_csv(paths["deaths"], index=False)
    with pytest.raises(SchemaError, match="lines 5"):
        load_csv_inputs(paths)


def test_synthetic_csv_roundtrip(tmp_path):
    sd = generate(SynthConfig(n_years=3, n_regions=3, n_ages=2), seed=4)
    paths = write_csv_inputs(sd, tmp_path)
    panel, covs, graph, pop, report = load_csv_inputs(paths, years=sd.panel.index.years)
    assert report.ok
    np.testing.assert_array_equal(panel.deaths, sd.panel.deaths)
    np.testing.assert_allclose(panel.exposures, sd.panel.exposures, rtol=1e-12)
    np.testing.assert_allclose(covs.tavg, sd.covariates.tavg, rtol=1e-12)
    np.testing.assert_allclose(covs.ili, sd.covariates.ili, rtol=1e-12)
    np.testing.assert_array_equal(graph.adjacency, sd.graph.adjacency)
