import numpy as np
import pytest

from weeklymort.crossbasis import DesignSpec, ili_spec, temperature_spec
from weeklymort.estimation import FitResult
from weeklymort.likelihood import ParamSet
from weeklymort.relative_risk import (curves_frame, default_grid, rr_by_lag, rr_monte_carlo,
                                      rr_overall, rr_surface)
from weeklymort.synthetic import project_surface, temperature_target

TEMPS = np.linspace(-5, 30, 500)


def make_fit(eta1=None, eta2=None, delta=1.0, epsilon=1.0, cov_scale=1e-4, seed=0):
    """Two-age, one-region FitResult with a chosen DLNM part and random PD covariance."""
    tspec = temperature_spec(TEMPS)
    ispec = ili_spec()
    design = DesignSpec((tspec,), ispec, np.zeros((52, 1)))
    th = ParamSet.initial(2, 3, 1, tspec.n_columns, ispec.n_columns)
    th.delta[1] = delta
    th.epsilon[1] = epsilon
    if eta1 is not None:
        th.eta1[0] = eta1
    if eta2 is not None:
        th.eta2[0] = eta2
    fit = FitResult(th, np.zeros((0, 0)), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, True,
                    meta={"design": design.to_dict()})
    n = fit.layout().n_free
    A = np.random.default_rng(seed).normal(size=(n, n))
    fit.covariance = cov_scale * (A @ A.T / n + np.eye(n))
    return fit


@pytest.fixture(scope="module")
def heat_fit():
    spec = temperature_spec(TEMPS)
    lo, hi = spec.covariate_basis.boundary
    eta = project_surface(spec, temperature_target, np.linspace(lo, hi, 60), 12.5)
    return make_fit(eta1=eta, eta2=np.array([0.05, -0.01, 0.0, 0.0]))


def test_reference_point_is_exactly_one(heat_fit):
    for ch, ref in (("temp", 12.5), ("ili", 0.0)):
        c = rr_overall(heat_fit, ch, 1, 0, [ref, ref + 3.0])
        assert c.rr[0] == 1.0 and c.var[0] == 0.0 and c.sd_log[0] == 0.0
        lag = rr_by_lag(heat_fit, ch, 1, 0, ref)
        assert np.all(lag.rr == 1.0) and np.all(lag.var == 0.0)
    s = rr_surface(heat_fit, "temp", 0, 0, [5.0, 12.5, 28.0], np.linspace(0, 4, 9))
    np.testing.assert_array_equal(s.rr[1], 1.0)


def test_lag_product_equals_overall(heat_fit):
    for ch, xs in (("temp", (-3.0, 25.0, 29.0)), ("ili", (40.0, 300.0))):
        for x in (0, 1):
            for xi in xs:
                prod = np.prod(rr_by_lag(heat_fit, ch, x, 0, xi).rr)
                overall = rr_overall(heat_fit, ch, x, 0, [xi]).rr[0]
                assert prod == pytest.approx(overall, rel=1e-12)


def test_surface_slices_match_by_lag(heat_fit):
    grid = np.array([0.0, 20.0, 27.0])
    s = rr_surface(heat_fit, "temp", 1, 0, grid, np.arange(5.0))
    for i, xi in enumerate(grid):
        lag = rr_by_lag(heat_fit, "temp", 1, 0, xi)
        np.testing.assert_allclose(s.rr[i], lag.rr, rtol=1e-14)
        np.testing.assert_allclose(s.var[i], lag.var, rtol=1e-12)


def test_zero_age_scaling_gives_unit_rr(heat_fit):
    fit = make_fit(eta1=heat_fit.theta.eta1[0], delta=0.0)
    c = rr_overall(fit, "temp", 1, 0, np.linspace(-5, 30, 20))
    np.testing.assert_array_equal(c.rr, 1.0)
    np.testing.assert_array_equal(c.var, 0.0)


def test_variance_formula_and_bands(heat_fit):
    c = rr_overall(heat_fit, "temp", 1, 0, [27.0, 0.0])
    # RR variance is (a RR)^2 z'Cz; the log-scale SD is |a| sqrt(z'Cz)
    np.testing.assert_allclose(c.var, (c.rr * c.sd_log) ** 2, rtol=1e-12)
    assert np.all(c.lo95 <= c.rr) and np.all(c.rr <= c.hi95)
    assert np.all(c.rr > 0)


def test_heat_and_harvesting_pattern(heat_fit):
    s = rr_surface(heat_fit, "temp", 0, 0, [28.0], [0.0, 1.0, 2.0])
    assert s.rr[0, 0] > 1.0
    assert s.rr[0, 1] < 1.0 and s.rr[0, 2] < 1.0
    assert rr_overall(heat_fit, "temp", 0, 0, [28.0]).rr[0] > 1.0


def test_effect_loaded_on_lag_zero():
    # least-squares lag function close to 1 at l = 0 and 0 afterwards
    spec = ili_spec()
    C = spec.lag_values()
    target = np.r_[1.0, np.zeros(spec.max_lag)]
    eta, *_ = np.linalg.lstsq(C, target, rcond=None)
    fit = make_fit(eta2=eta * 2e-3)
    rr = rr_by_lag(fit, "ili", 0, 0, 100.0).rr
    np.testing.assert_allclose(np.log(rr), 0.2 * (C @ eta), rtol=1e-12, atol=1e-14)
    assert rr[0] == pytest.approx(np.exp(0.2), rel=1e-3)
    np.testing.assert_allclose(rr[1:], 1.0, atol=3e-3)


def test_contrast_removes_covariate_intercept():
    from weeklymort.basis import BasisSpec
    from weeklymort.crossbasis import DlnmSpec, lag_spline
    spec = DlnmSpec(BasisSpec("linear", intercept=True), lag_spline(6), 6)
    design = DesignSpec(None, spec, np.zeros((52, 1)))
    th = ParamSet.initial(1, 3, 1, 0, spec.n_columns)
    rng = np.random.default_rng(1)
    th.eta2[0] = rng.normal(0, 1e-3, spec.n_columns)
    fit = FitResult(th, np.zeros((0, 0)), 0, 0, 0, 0, 0, 0, 0, True,
                    meta={"design": design.to_dict()})
    fit.covariance = np.eye(fit.layout().n_free) * 1e-6
    base = rr_overall(fit, "ili", 0, 0, [50.0, 200.0])
    # intercept columns are the first n_lag entries (covariate-major order)
    th.eta2[0, :spec.n_lag] += 5.0
    shifted = rr_overall(fit, "ili", 0, 0, [50.0, 200.0])
    np.testing.assert_allclose(shifted.rr, base.rr, rtol=1e-14)
    # without the intercept column a shift of the slope coefficients moves the curve
    plain = make_fit(eta2=np.zeros(4))
    moved = make_fit(eta2=np.full(4, 1e-3))
    assert rr_overall(moved, "ili", 0, 0, [50.0]).rr[0] != rr_overall(plain, "ili", 0, 0,
                                                                       [50.0]).rr[0]


def test_outside_range_flagged(heat_fit, caplog):
    c = rr_overall(heat_fit, "temp", 0, 0, [-40.0, 10.0])
    assert c.outside.tolist() == [True, False]
    assert "outside the calibration range" in caplog.text


def test_unknown_channel_and_missing_design():
    fit = make_fit()
    with pytest.raises(ValueError):
        rr_overall(fit, "humidity", 0, 0, [1.0])
    fit.meta = {}
    with pytest.raises(ValueError, match="design"):
        rr_overall(fit, "temp", 0, 0, [1.0])


def test_frame_columns(heat_fit):
    curves = [rr_overall(heat_fit, "temp", 0, 0, [5.0, 25.0]),
              rr_surface(heat_fit, "temp", 0, 0, [25.0], [0.0, 0.5])]
    df = curves_frame(curves, ages=["young", "old"], regions=["R01"])
    assert list(df.columns) == ["channel", "age", "region", "xi", "lag", "rr", "sd", "lo95",
                                "hi95"]
    assert len(df) == 4 and df["age"].eq("young").all()
    assert np.allclose(default_grid([3.0, -1.0, 7.0], 5), [-1, 1, 3, 5, 7])


def test_delta_method_matches_monte_carlo(fitted_default):
    sd, fit = fitted_default
    grid = np.array([0.0, 5.0, 20.0, 25.0])
    for r in range(2):
        c = rr_overall(fit, "temp", 2, r, grid)
        mc = rr_monte_carlo(fit, "temp", 2, r, grid, n=20000, seed=r)
        np.testing.assert_allclose(c.sd, mc, rtol=0.15)
