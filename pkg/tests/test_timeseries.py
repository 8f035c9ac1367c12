import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.linalg import toeplitz

from weeklymort.timeseries import (ILI_SHIFT, CopulaModel, DriverModels, SarimaxFit, SarimaxSpec,
                                   arma_acovf, coef_to_pacf, durbin_levinson_loglik, fit_copula,
                                   fit_drivers, fit_sarimax, nearest_pd_corr, pacf_to_coef,
                                   paths_frame, simulate_joint, substream)

ARMA11 = SarimaxSpec((1, 0, 1), (0, 0, 0), 1)


def test_white_noise_fits_white():
    # phi and theta are not separately identified on white noise (the
    # polynomials cancel along phi = -theta); the first psi-weight is
    ar1 = SarimaxSpec((1, 0, 0), (0, 0, 0), 1)
    passed = 0
    for seed in range(20):
        y = np.random.default_rng(seed).standard_normal(2000)
        f = fit_sarimax(y, spec=ARMA11)
        g = fit_sarimax(y, spec=ar1)
        passed += abs(f.ar[0] + f.ma[0]) < 0.1 and abs(g.ar[0]) < 0.1
    assert passed >= 18


def test_random_walk_ma_zero_and_flat_forecast():
    rng = np.random.default_rng(3)
    y = np.cumsum(rng.standard_normal(1500))
    f = fit_sarimax(y, spec=SarimaxSpec((0, 1, 1), (0, 0, 0), 1))
    assert abs(f.ma[0]) < 0.1
    path = f.paths(np.zeros((1, 10)))[0]
    # the only memory beyond the last value is theta times the last innovation
    np.testing.assert_allclose(path, y[-1] + f.ma[0] * f.resid[-1], atol=1e-10)
    assert np.ptp(path) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=4))
def test_pacf_roundtrip_and_stationarity(x):
    phi = pacf_to_coef(x)
    # reciprocal roots of 1 - phi_1 z - ... lie inside the unit circle
    assert np.all(np.abs(np.roots(np.r_[1.0, -phi])) < 1.0)
    np.testing.assert_allclose(pacf_to_coef(coef_to_pacf(phi)), phi, atol=1e-9)


def test_acovf_ar1_closed_form():
    g = arma_acovf(np.array([1.0, -0.6]), np.array([1.0]), 5, sigma2=2.0)
    np.testing.assert_allclose(g, 2.0 / (1 - 0.36) * 0.6 ** np.arange(5), rtol=1e-10)


def test_durbin_levinson_matches_dense_gaussian():
    a, b = np.array([1.0, -0.5]), np.array([1.0, 0.4])
    w = np.random.default_rng(1).standard_normal(60)
    g = arma_acovf(a, b, w.size, sigma2=1.3)
    ll, e = durbin_levinson_loglik(g, w)
    ref = stats.multivariate_normal(np.zeros(w.size), toeplitz(g)).logpdf(w)
    assert ll == pytest.approx(ref, rel=1e-10)
    assert e.shape == w.shape


def test_agrees_with_statsmodels():
    sm = pytest.importorskip("statsmodels.tsa.statespace.sarimax")
    true = SarimaxFit.from_params(ARMA11, [0.6], [-0.3])
    for seed in range(3):
        y = true.simulate(1000, np.random.default_rng(seed))
        f = fit_sarimax(y, spec=ARMA11)
        ref = sm.SARIMAX(y, order=(1, 0, 1)).fit(disp=False)
        assert f.ar[0] == pytest.approx(ref.params[0], abs=0.02)
        assert f.ma[0] == pytest.approx(ref.params[1], abs=0.02)


def test_regression_coefficient_recovered():
    rng = np.random.default_rng(7)
    x = rng.normal(size=1200)
    noise = SarimaxFit.from_params(ARMA11, [0.5], [0.2]).simulate(1200, rng)
    f = fit_sarimax(2.0 * x + noise, x[:, None], SarimaxSpec((1, 0, 1), (0, 0, 0), 1,
                                                             False, ("x",)))
    assert f.beta[0] == pytest.approx(2.0, abs=0.05)


def test_fit_errors():
    with pytest.raises(ValueError, match="too short"):
        fit_sarimax(np.zeros(60), spec=SarimaxSpec((1, 0, 1), (1, 1, 1), 52))
    with pytest.raises(ValueError):
        fit_sarimax(np.r_[np.zeros(100), np.nan], spec=ARMA11)
    with pytest.raises(ValueError):
        SarimaxSpec((-1, 0, 0))


def test_copula_independent_inputs():
    x = np.random.default_rng(0).standard_normal((1000, 3))
    c = fit_copula(x)
    off = c.corr[~np.eye(3, dtype=bool)]
    assert np.all(np.abs(off) < 0.1)


def test_copula_comonotone_is_clipped():
    x = np.random.default_rng(0).standard_normal(500)
    c = fit_copula(np.column_stack([x, np.exp(x)]), family="gaussian")
    assert c.corr[0, 1] == pytest.approx(1 - 1e-6, abs=1e-12)


def test_t_copula_recovery():
    true = CopulaModel("student-t", np.array([[1.0, 0.7], [0.7, 1.0]]), 5.0)
    z = true.normal_scores(np.random.default_rng(2), 2000)
    c = fit_copula(z)
    assert 0.6 <= c.corr[0, 1] <= 0.8
    assert 3 <= c.df <= 10


def test_copula_min_obs_warning_and_bad_df():
    with pytest.warns(UserWarning):
        fit_copula(np.random.default_rng(0).standard_normal((50, 2)), family="gaussian")
    with pytest.raises(ValueError):
        CopulaModel("student-t", np.eye(2), 2.0)


def test_nearest_pd_repair():
    bad = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    fixed, flagged = nearest_pd_corr(bad)
    assert flagged
    np.testing.assert_allclose(np.diag(fixed), 1.0)
    np.testing.assert_allclose(fixed, fixed.T)
    assert np.linalg.eigvalsh(fixed).min() > 0
    same, flagged = nearest_pd_corr(np.eye(3))
    assert not flagged and np.array_equal(same, np.eye(3))


@pytest.fixture(scope="module")
def drivers():
    rng = np.random.default_rng(11)
    weeks = np.arange(52 * 16)
    R = 2
    season = 10 * np.sin(2 * np.pi * weeks / 52)
    tavg = 12 + season[:, None] + rng.normal(0, 1.5, (weeks.size, 1)) \
        + rng.normal(0, 1.0, (weeks.size, R))
    ili = np.maximum(0.0, 50 * np.cos(2 * np.pi * weeks / 52)[:, None]
                     + rng.normal(0, 10, (weeks.size, R)))
    kappa = np.cumsum(rng.normal(-0.02, 0.03, (16, R)), axis=0)
    return fit_drivers(tavg, ili, kappa)


def test_zero_innovations_give_deterministic_forecast(drivers):
    H = 60
    sim = simulate_joint(drivers, H, 1, seed=0, zero_innovations=True)
    for r, f in enumerate(drivers.temp):
        np.testing.assert_array_equal(sim["tavg"][0, :, r], f.paths(np.zeros((1, H)))[0])
    log_ili = drivers.ili[0].paths(np.zeros((1, H)), sim["tavg"][0, :, [0]].T)[0]
    np.testing.assert_allclose(sim["ili"][0, :, 0],
                               np.maximum(np.exp(log_ili) - ILI_SHIFT, 0), rtol=1e-14)
    assert sim["kappa"].shape == (1, 2, 2)


def test_ili_paths_nonnegative_and_shapes(drivers):
    sim = simulate_joint(drivers, 104, 20, seed=1)
    assert np.all(sim["ili"] >= 0)
    assert sim["tavg"].shape == (20, 104, 2) and sim["kappa"].shape == (20, 2, 2)
    with pytest.raises(ValueError):
        simulate_joint(drivers, 0, 5, seed=1)


def test_determinism_and_stream_isolation(drivers):
    a = simulate_joint(drivers, 52, 5, seed=42)
    b = simulate_joint(drivers, 52, 5, seed=42)
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    # perturb the kappa layer only: its innovations change, drivers must not
    import weeklymort.timeseries as ts
    kc = CopulaModel("gaussian", np.array([[1.0, 0.5], [0.5, 1.0]]))
    other = DriverModels(drivers.temp, drivers.ili, drivers.kappa, drivers.temp_copula,
                         drivers.ili_copula, kc)
    c = simulate_joint(other, 52, 5, seed=42)
    np.testing.assert_array_equal(a["tavg"], c["tavg"])
    np.testing.assert_array_equal(a["ili"], c["ili"])
    assert not np.array_equal(a["kappa"], c["kappa"])
    assert ts.STREAMS["sim-kappa"] not in (ts.STREAMS["sim-temp"], ts.STREAMS["sim-ili"])
    x = substream(42, "sim-temp", 3).standard_normal(4)
    y = substream(42, "sim-kappa", 3).standard_normal(4)
    assert not np.array_equal(x, y)


def test_simulated_correlation_matches_copula():
    rho = 0.55
    cop = CopulaModel("student-t", np.array([[1.0, rho], [rho, 1.0]]), 6.0)
    z = np.concatenate([cop.normal_scores(substream(0, "sim-temp", i), 1)
                        for i in range(10_000)])
    tau = stats.kendalltau(z[:, 0], z[:, 1]).statistic
    assert np.sin(np.pi * tau / 2) == pytest.approx(rho, abs=0.05)


def test_path_mean_tracks_deterministic_forecast(drivers):
    sim = simulate_joint(drivers, 10, 2000, seed=5, with_kappa=False)
    det = simulate_joint(drivers, 10, 1, seed=5, zero_innovations=True, with_kappa=False)
    sd = sim["tavg"].std(axis=0)
    err = np.abs(sim["tavg"].mean(axis=0) - det["tavg"][0])
    assert np.all(err < 4 * sd / np.sqrt(2000))


def test_paths_frame_columns(drivers):
    sim = simulate_joint(drivers, 53, 2, seed=0)
    df = paths_frame(sim, regions=["A", "B"])
    assert list(df.columns) == ["path_id", "t", "isoweek", "region", "variable", "value"]
    tav = df[df.variable == "tavg"]
    assert len(tav) == 2 * 53 * 2 and tav.isoweek.max() == 52 and tav.isoweek.min() == 1
    assert set(df.region) == {"A", "B"}
    assert set(drivers.summary().layer) == {"temp", "ili", "kappa"}
