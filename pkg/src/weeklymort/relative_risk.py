"""Relative risks of temperature and ILI exceedances with delta-method bands."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .crossbasis import DesignSpec, contrast_vector, lag_contrast_vector

log = logging.getLogger(__name__)

Z95 = 1.959963984540054
CHANNELS = {"temp": ("delta", "eta1"), "ili": ("epsilon", "eta2")}
DEFAULT_REF = {"temp": 12.5, "ili": 0.0}


@dataclass(frozen=True, eq=False)
class RrCurve:
    channel: str
    kind: str              # overall, lag or surface
    age: int
    region: int
    xi: np.ndarray
    lag: np.ndarray | None
    rr: np.ndarray
    var: np.ndarray        # variance of RR itself (delta method)
    sd_log: np.ndarray     # standard deviation of log RR
    outside: np.ndarray    # xi outside the calibration range of the basis

    @property
    def lo95(self):
        return self.rr * np.exp(-Z95 * self.sd_log)

    @property
    def hi95(self):
        return self.rr * np.exp(Z95 * self.sd_log)

    @property
    def sd(self):
        return np.sqrt(self.var)

    def frame(self, age_label=None, region_label=None):
        xi = np.broadcast_to(self.xi.reshape(-1, 1) if self.rr.ndim == 2 else self.xi, self.rr.shape)
        if self.lag is None:
            lag = np.full(self.rr.shape, np.nan)
        else:
            lag = np.broadcast_to(self.lag, self.rr.shape)
        n = self.rr.size
        return pd.DataFrame({
            "channel": [self.channel] * n,
            "age": [self.age if age_label is None else age_label] * n,
            "region": [self.region if region_label is None else region_label] * n,
            "xi": np.ravel(xi), "lag": np.ravel(lag), "rr": self.rr.ravel(),
            "sd": self.sd.ravel(), "lo95": self.lo95.ravel(), "hi95": self.hi95.ravel()})


def _design(fit, design):
    if design is not None:
        return design
    d = fit.meta.get("design")
    if d is None:
        raise ValueError("fit carries no DLNM design; pass design explicitly")
    return DesignSpec.from_dict(d)


def _channel_parts(fit, design, channel, x, r):
    if channel not in CHANNELS:
        raise ValueError(f"channel must be one of {sorted(CHANNELS)}")
    a_name, eta_name = CHANNELS[channel]
    spec = design.temp[r] if channel == "temp" else design.ili
    if spec is None:
        raise ValueError(f"model has no {channel} component")
    eta = getattr(fit.theta, eta_name)[r]
    a = float(getattr(fit.theta, a_name)[x])
    lay = fit.layout()
    Q = eta.size
    s = lay.free_slices[eta_name]
    idx = np.arange(s.start + r * Q, s.start + (r + 1) * Q)
    cov = fit.covariance[np.ix_(idx, idx)]
    return spec, a, eta, cov


def _curve(xi, zs, a, eta, cov, spec):
    zs = np.atleast_2d(zs)
    logrr = a * (zs @ eta)
    quad = np.einsum("iq,qk,ik->i", zs, cov, zs)
    sd_log = np.abs(a) * np.sqrt(np.maximum(quad, 0.0))
    rr = np.exp(logrr)
    var = (a * rr) ** 2 * np.maximum(quad, 0.0)
    lo, hi = spec.covariate_basis.boundary
    xi = np.asarray(xi, dtype=float)
    outside = (xi < lo) | (xi > hi) if spec.covariate_basis.kind != "linear" else xi < 0
    return rr, var, sd_log, outside


def rr_overall(fit, channel, x, r, grid, ref=None, design=None):
    """Cumulative RR over all lags for each value in ``grid``."""
    design = _design(fit, design)
    spec, a, eta, cov = _channel_parts(fit, design, channel, x, r)
    ref = DEFAULT_REF[channel] if ref is None else ref
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    zs = np.array([contrast_vector(spec, g, ref) for g in grid])
    rr, var, sd_log, outside = _curve(grid, zs, a, eta, cov, spec)
    if outside.any():
        log.warning("%d evaluation points outside the calibration range", int(outside.sum()))
    return RrCurve(channel, "overall", x, r, grid, None, rr, var, sd_log, outside)


def rr_by_lag(fit, channel, x, r, xi, ref=None, design=None, lags=None):
    """RR of a fixed exposure ``xi`` at each lag (default 0..L)."""
    design = _design(fit, design)
    spec, a, eta, cov = _channel_parts(fit, design, channel, x, r)
    ref = DEFAULT_REF[channel] if ref is None else ref
    lags = np.arange(spec.max_lag + 1) if lags is None else np.asarray(lags, dtype=float)
    zs = np.array([lag_contrast_vector(spec, xi, ref, l) for l in lags])
    rr, var, sd_log, outside = _curve(np.full(lags.size, xi), zs, a, eta, cov, spec)
    return RrCurve(channel, "lag", x, r, np.full(lags.size, float(xi)), lags, rr, var,
                   sd_log, outside)


def rr_surface(fit, channel, x, r, grid, lags, ref=None, design=None):
    """RR over the (xi, lag) grid; fractional lags are allowed."""
    design = _design(fit, design)
    spec, a, eta, cov = _channel_parts(fit, design, channel, x, r)
    ref = DEFAULT_REF[channel] if ref is None else ref
    grid = np.asarray(grid, dtype=float)
    lags = np.asarray(lags, dtype=float)
    zs = np.array([lag_contrast_vector(spec, g, ref, l) for g in grid for l in lags])
    xi_flat = np.repeat(grid, lags.size)
    rr, var, sd_log, outside = _curve(xi_flat, zs, a, eta, cov, spec)
    shape = (grid.size, lags.size)
    return RrCurve(channel, "surface", x, r, grid, lags, rr.reshape(shape), var.reshape(shape),
                   sd_log.reshape(shape), outside.reshape(shape))


def rr_monte_carlo(fit, channel, x, r, grid, ref=None, design=None, n=4000, seed=0,
                   include_age=False):
    """Monte Carlo SD of the overall RR from the fitted covariance.

    With ``include_age`` the age scaling coefficient is sampled jointly
    with the region's coefficients.
    """
    design = _design(fit, design)
    spec, a, eta, cov = _channel_parts(fit, design, channel, x, r)
    ref = DEFAULT_REF[channel] if ref is None else ref
    zs = np.array([contrast_vector(spec, g, ref) for g in np.atleast_1d(grid)])
    rng = np.random.default_rng(seed)
    if include_age and x > 0:
        a_name, eta_name = CHANNELS[channel]
        lay = fit.layout()
        Q = eta.size
        s = lay.free_slices[eta_name]
        ia = lay.free_slices[a_name].start + x - 1
        idx = np.r_[ia, np.arange(s.start + r * Q, s.start + (r + 1) * Q)]
        draws = rng.multivariate_normal(np.r_[a, eta], fit.covariance[np.ix_(idx, idx)], n,
                                        method="eigh")
        logrr = draws[:, :1] * (draws[:, 1:] @ zs.T)
    else:
        draws = rng.multivariate_normal(eta, cov, n, method="eigh")
        logrr = a * (draws @ zs.T)
    return np.exp(logrr).std(axis=0, ddof=1)


def default_grid(values, n=100):
    """Equally spaced grid between the observed minimum and maximum."""
    v = np.asarray(values, dtype=float)
    return np.linspace(np.nanmin(v), np.nanmax(v), n)


def curves_frame(curves, ages=None, regions=None):
    frames = [c.frame(None if ages is None else ages[c.age],
                      None if regions is None else regions[c.region]) for c in curves]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["channel", "age", "region", "xi", "lag", "rr", "sd", "lo95", "hi95"])
