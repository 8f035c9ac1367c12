import copy

import numpy as np
import pytest
from scipy import stats

from conftest import small_instance
from weeklymort.basis import BasisSpec
from weeklymort.crossbasis import DesignSpec, DlnmSpec
from weeklymort.data_model import N_WEEKS
from weeklymort.estimation import fit_model
from weeklymort.forecast import (ForecastSet, coverage, dlnm_contributions, forecast_mu,
                                 future_exposures, insample_bounds, prediction_intervals,
                                 sample_deaths)
from weeklymort.likelihood import ParamSet, log_mu


def test_one_step_without_dlnm_is_baseline(synth_default):
    sd = synth_default
    th = sd.theta.copy()
    th.eta1[:] = 0.0
    th.eta2[:] = 0.0
    kappa = np.array([[0.1, -0.2, 0.05, 0.3]])
    t = sd.covariates.flat("tavg")
    i = sd.covariates.flat("ili")
    out = forecast_mu(th, kappa, 1, sd.design, t[:1], i[:1], (t, i))[0, :, 0]
    ref = th.alpha + th.beta[:, None] * kappa[0] + th.gamma[:, None] * th.lam[0]
    np.testing.assert_array_equal(out, ref)


def test_observed_covariates_reproduce_insample(synth_default):
    sd = synth_default
    th = sd.theta
    T = th.kappa.shape[0]
    H = T * N_WEEKS
    out = forecast_mu(th, th.kappa, H, sd.design, sd.covariates.flat("tavg"),
                      sd.covariates.flat("ili"))[0]
    ref = log_mu(th, sd.model_data)
    X, _, _, R = ref.shape
    np.testing.assert_allclose(out, ref.reshape(X, H, R), rtol=0, atol=1e-12)


def test_lag_one_row_mixes_history_and_forecast():
    ident = BasisSpec("identity")
    lag = BasisSpec("linear", intercept=True)        # c(l) = (1, l)
    spec = DlnmSpec(ident, lag, 1)
    design = DesignSpec((spec,), None, None)
    th = ParamSet.initial(1, 1, 1, 2, 0)
    th.eta1[0] = [0.3, -0.7]
    hist, new = 4.0, 9.0
    F1, _ = dlnm_contributions(th, design, np.array([[new]]), np.array([[0.0]]),
                               (np.array([[hist]]), np.array([[0.0]])))
    # row = b(x_t) c(0) + b(x_{t-1}) c(1) = (new + hist, hist)
    assert F1[0, 0, 0] == pytest.approx(0.3 * (new + hist) - 0.7 * hist, abs=1e-14)
    with pytest.raises(ValueError, match="history"):
        dlnm_contributions(th, design, np.array([[new]]), np.array([[0.0]]),
                           (np.zeros((0, 1)), np.zeros((0, 1))))


def _one_cell(m, phi, n, seed=0):
    lm = np.full((n, 1, 1, 1), np.log(m))
    return sample_deaths(lm, np.ones((1, 1, 1)), np.array([[phi]]), seed).ravel()


def test_nb_mean_and_variance():
    m, phi, n = 50.0, 5.0, 100_000
    d = _one_cell(m, phi, n)
    var = m + m * m / phi
    assert abs(d.mean() - m) < 3 * np.sqrt(var / n)
    assert d.var() == pytest.approx(var, rel=0.05)
    assert d.dtype.kind == "i" and d.min() >= 0


def test_poisson_limit_of_sampler():
    d = _one_cell(40.0, 1e8, 100_000, seed=1)
    assert d.var() / d.mean() == pytest.approx(1.0, abs=0.05)


def test_sampler_is_reproducible_and_checks_shapes():
    a = _one_cell(10.0, 3.0, 50, seed=9)
    b = _one_cell(10.0, 3.0, 50, seed=9)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sample_deaths(np.zeros((5, 2, 3, 1)), np.ones((2, 3, 1)), np.ones((1, 1)), 0)


def test_interval_against_nb_quantiles():
    d = _one_cell(50.0, 5.0, 10_000, seed=2)[:, None]
    lo, hi = prediction_intervals(d)
    p = 5.0 / 55.0
    assert abs(lo[0] - stats.nbinom.ppf(0.025, 5.0, p)) <= 1
    assert abs(hi[0] - stats.nbinom.ppf(0.975, 5.0, p)) <= 1


def test_interval_edge_cases():
    lo, hi = prediction_intervals(np.full((200, 3), 7))
    assert np.all(lo == 7) and np.all(hi == 7)
    rng = np.random.default_rng(0)
    q = prediction_intervals(rng.poisson(20, (500, 4)), (0.25, 0.5, 0.75))
    assert np.all(np.diff(q, axis=0) >= 0)
    with pytest.raises(ValueError):
        prediction_intervals(np.zeros((99, 2)))


def test_held_and_supplied_exposures():
    E = np.arange(2 * 3 * 52 * 2, dtype=float).reshape(2, 3, 52, 2)
    held = future_exposures(E, 60)
    assert held.shape == (2, 60, 2)
    np.testing.assert_array_equal(held[:, 7], E[:, -1, 50])
    fut = np.ones((2, 2, 52, 2))
    assert future_exposures(E, 60, fut).shape == (2, 60, 2)
    with pytest.raises(ValueError):
        future_exposures(E, 200, fut)


def test_horizon_and_kappa_length_errors():
    th = ParamSet.initial(1, 1, 1, 0, 0)
    with pytest.raises(ValueError):
        forecast_mu(th, np.zeros((1, 1)), 0)
    with pytest.raises(ValueError, match="kappa"):
        forecast_mu(th, np.zeros((1, 1)), 60)


@pytest.fixture(scope="module")
def small_fit():
    th, md = small_instance(seed=3, X=2, T=3, R=2, Q1=1, Q2=1)
    return fit_model(md), md


def test_zero_covariance_gives_nb_bounds(small_fit):
    fit, md = small_fit
    f = copy.copy(fit)
    f.covariance = np.zeros_like(fit.covariance)
    n = 5000
    lo, hi = insample_bounds(f, md, n_sims=n, seed=1)
    m = md.exposures * np.exp(log_mu(fit.theta, md))
    phi = fit.theta.dispersion[:, None, None, :]
    p = phi / (phi + m)
    # empirical quantiles within a 4-sigma band on the probability scale
    for q, level in ((lo, 0.025), (hi, 0.975)):
        band = 4 * np.sqrt(level * (1 - level) / n)
        assert np.all(q >= stats.nbinom.ppf(level - band, phi, p))
        assert np.all(q <= stats.nbinom.ppf(level + band, phi, p))


def test_bounds_widen_with_covariance(small_fit):
    fit, md = small_fit
    lo1, hi1 = insample_bounds(fit, md, n_sims=10_000, seed=2)
    lo4, hi4 = insample_bounds(fit, md, n_sims=10_000, seed=2, cov_scale=4.0)
    w1, w4 = hi1 - lo1, hi4 - lo4
    assert w4.mean() > w1.mean()
    assert np.mean(w4 >= w1 - 1) > 0.99


def test_insample_coverage(fitted_default):
    sd, fit = fitted_default
    lo, hi = insample_bounds(fit, sd.model_data, n_sims=2000, seed=0)
    cov = coverage(sd.model_data.deaths, lo, hi)
    assert 0.92 <= cov <= 0.98


def test_forecast_set_frame_and_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    S, X, H, R = 200, 2, 3, 2
    samples = rng.poisson(30, (S, X, H, R))
    fs = ForecastSet("model3", np.zeros((S, X, H, R)), np.ones((X, H, R)), samples,
                     samples.mean(axis=0), 2020)
    df = fs.frame(["a", "b"], ["R1", "R2"])
    assert list(df.columns) == ["age", "region", "year", "isoweek", "mean", "q025", "q500",
                                "q975"]
    assert np.all(df.q025 <= df.q500) and np.all(df.q500 <= df.q975)
    fs.save(tmp_path / "f")
    back = ForecastSet.load(tmp_path / "f")
    np.testing.assert_array_equal(back.samples, samples)
    assert back.start_year == 2020 and back.horizon == H


def test_zeroed_dlnm_nests_baseline_exactly(synth_default):
    sd = synth_default
    th = sd.theta.copy()
    th.eta1[:] = 0.0
    th.eta2[:] = 0.0
    rng = np.random.default_rng(0)
    kappa = rng.normal(0, 0.05, (50, 2, 4))
    t = sd.covariates.flat("tavg")
    i = sd.covariates.flat("ili")
    with_cov = forecast_mu(th, kappa, 104, sd.design, t[:104], i[:104], (t, i))
    base = forecast_mu(th, kappa, 104)
    np.testing.assert_array_equal(with_cov, base)
    E = future_exposures(sd.panel.exposures, 104)[None]
    np.testing.assert_array_equal(sample_deaths(with_cov, E, th.dispersion, 3),
                                  sample_deaths(base, E, th.dispersion, 3))


def test_interval_endpoints_stable_in_nsims():
    lm = np.full((10_000, 1, 4, 1), np.log(400.0))
    d = sample_deaths(lm, np.ones((1, 4, 1)), np.array([[300.0]]), seed=4)
    small = prediction_intervals(d[:1000])
    big = prediction_intervals(d)
    assert np.all(np.abs(small - big) / big < 0.02)
