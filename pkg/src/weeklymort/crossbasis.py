"""DLNM cross-basis matrices and fixed-exposure contrast vectors.

Columns are ordered covariate-basis major, lag-basis minor: column
``j * v_lag + k`` holds ``sum_l b_j(x[t - l]) * c_k(l)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .basis import BasisSpec, eval_basis, knots_from_percentiles

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DlnmSpec:
    covariate_basis: BasisSpec
    lag_basis: BasisSpec
    max_lag: int

    def __post_init__(self):
        if int(self.max_lag) != self.max_lag or self.max_lag < 0:
            raise ValueError(f"max_lag must be a nonnegative integer, got {self.max_lag}")
        object.__setattr__(self, "max_lag", int(self.max_lag))

    @property
    def n_cov(self):
        return self.covariate_basis.n_columns

    @property
    def n_lag(self):
        return self.lag_basis.n_columns

    @property
    def n_columns(self):
        return self.n_cov * self.n_lag

    def lag_values(self, lags=None):
        lags = np.arange(self.max_lag + 1) if lags is None else np.asarray(lags, float)
        return eval_basis(self.lag_basis, lags)

    def to_dict(self):
        return {"covariate_basis": self.covariate_basis.to_dict(),
                "lag_basis": self.lag_basis.to_dict(), "max_lag": self.max_lag}

    @classmethod
    def from_dict(cls, d):
        return cls(BasisSpec.from_dict(d["covariate_basis"]),
                   BasisSpec.from_dict(d["lag_basis"]), d["max_lag"])


@dataclass(frozen=True, eq=False)
class CrossBasis:
    region: str
    matrix: np.ndarray
    burn_in_rows: int = 0


def lag_spline(max_lag, knots=(0.5, 1.5)):
    """Natural cubic lag basis with intercept on [0, max_lag]."""
    inner = tuple(k for k in knots if 0 < k < max_lag)
    return BasisSpec("natural-cubic", inner, (0.0, float(max(max_lag, 1))), intercept=True)


def temperature_spec(values, max_lag=4, probs=(0.10, 0.90), lag_knots=(0.5, 1.5)):
    """Cubic B-spline in temperature with percentile knots, natural-spline lags."""
    knots, bounds = knots_from_percentiles(values, probs)
    return DlnmSpec(BasisSpec("cubic-bspline", knots, bounds, intercept=False),
                    lag_spline(max_lag, lag_knots), max_lag)


def ili_spec(max_lag=6, lag_knots=(0.5, 1.5)):
    """Linear exposure-response for ILI exceedances, natural-spline lags."""
    return DlnmSpec(BasisSpec("linear"), lag_spline(max_lag, lag_knots), max_lag)


def build_crossbasis(series, spec, history=None, burn_in=True, region=""):
    """Cross-basis matrix of shape (len(series), spec.n_columns).

    ``history`` holds covariate values immediately preceding ``series``
    (most recent last). Missing history is filled with the earliest
    available value when ``burn_in`` is true.
    """
    x = np.asarray(series, dtype=float).ravel()
    hist = np.zeros(0) if history is None else np.asarray(history, dtype=float).ravel()
    L = spec.max_lag
    full = np.r_[hist, x]
    short = max(L - hist.size, 0)
    if short:
        if not burn_in:
            raise ValueError(f"need {L} weeks of covariate history, got {hist.size}")
        full = np.r_[np.full(short, full[0]), full]
    start = full.size - x.size
    B = eval_basis(spec.covariate_basis, full)
    C = spec.lag_values()
    T = x.size
    Z = np.zeros((T, spec.n_cov, spec.n_lag))
    for lag in range(L + 1):
        Z += B[start - lag:start - lag + T, :, None] * C[lag][None, None, :]
    return CrossBasis(region, Z.reshape(T, -1), burn_in_rows=min(short, T))


def crossbasis_panel(values, specs, history=None, burn_in=True):
    """Cross-bases for every region: returns an array (R, T, Q).

    ``values`` is (T, R); ``specs`` is one DlnmSpec per region (or a single
    spec used everywhere); ``history`` is an optional (H, R) array.
    """
    values = np.asarray(values, dtype=float)
    R = values.shape[1]
    if isinstance(specs, DlnmSpec):
        specs = [specs] * R
    out = []
    for r in range(R):
        h = None if history is None else np.asarray(history)[:, r]
        out.append(build_crossbasis(values[:, r], specs[r], h, burn_in).matrix)
    return np.stack(out)


def contrast_vector(spec, xi, xi_ref):
    """Overall contrast: (b(xi) - b(xi_ref)) outer sum over lags of c(l)."""
    db = eval_basis(spec.covariate_basis, [xi, xi_ref])
    db = db[0] - db[1]
    return np.outer(db, spec.lag_values().sum(axis=0)).ravel()


def lag_contrast_vector(spec, xi, xi_ref, lag):
    """Contrast at a single (possibly fractional) lag."""
    if not 0 <= lag <= spec.max_lag:
        raise ValueError(f"lag {lag} outside 0..{spec.max_lag}")
    db = eval_basis(spec.covariate_basis, [xi, xi_ref])
    db = db[0] - db[1]
    return np.outer(db, spec.lag_values([lag])[0]).ravel()


@dataclass(frozen=True, eq=False)
class DesignSpec:
    """Everything needed to rebuild Z1/Z2 from raw weekly covariates.

    ``temp`` holds one spec per region (knots are region specific);
    ``ili_thresholds`` is the (52, R) exceedance threshold table.
    """
    temp: tuple | None
    ili: DlnmSpec | None
    ili_thresholds: np.ndarray | None = None

    def to_dict(self):
        return {"temp": None if self.temp is None else [s.to_dict() for s in self.temp],
                "ili": None if self.ili is None else self.ili.to_dict(),
                "ili_thresholds": (None if self.ili_thresholds is None
                                   else np.asarray(self.ili_thresholds).tolist())}

    @classmethod
    def from_dict(cls, d):
        temp = d.get("temp")
        ili = d.get("ili")
        thr = d.get("ili_thresholds")
        return cls(None if temp is None else tuple(DlnmSpec.from_dict(s) for s in temp),
                   None if ili is None else DlnmSpec.from_dict(ili),
                   None if thr is None else np.asarray(thr, dtype=float))

    def ili_anomaly(self, ili):
        """Exceedance of raw weekly ILI (T, 52, R) over the stored thresholds."""
        return np.maximum(np.asarray(ili, float) - self.ili_thresholds[None], 0.0)


def default_design(tavg, ili, temp_lag=4, ili_lag=6, probs=(0.10, 0.90),
                   lag_knots=(0.5, 1.5), calibration=None, q=0.9):
    """Region-specific temperature specs and ILI thresholds from (T, 52, R) covariates.

    ``calibration`` optionally selects the year positions used for ILI
    thresholds; all years are used otherwise.
    """
    tavg = np.asarray(tavg, dtype=float)
    ili = np.asarray(ili, dtype=float)
    R = tavg.shape[-1]
    temp = tuple(temperature_spec(tavg[..., r], temp_lag, probs, lag_knots) for r in range(R))
    cal = ili if calibration is None else ili[list(calibration)]
    thr = np.quantile(cal, q, axis=0, method="linear")
    return DesignSpec(temp, ili_spec(ili_lag, lag_knots), thr)


def design_matrices(design, tavg, ili, history=None, burn_in=True):
    """Cross-bases Z1 (temperature) and Z2 (ILI exceedance), each (R, T*52, Q).

    ``history`` is an optional pair of (H, R) arrays of earlier weekly
    temperature and raw ILI values.
    """
    tavg = np.asarray(tavg, dtype=float)
    T, W, R = tavg.shape
    h_t = h_i = None
    if history is not None:
        h_t, h_i = history
    Z1 = Z2 = None
    if design.temp is not None:
        Z1 = crossbasis_panel(tavg.reshape(T * W, R), list(design.temp), h_t, burn_in)
    if design.ili is not None:
        anom = design.ili_anomaly(ili).reshape(T * W, R)
        h_a = None
        if h_i is not None:
            wk = (np.arange(-len(h_i), 0) % W)
            h_a = np.maximum(np.asarray(h_i, float) - design.ili_thresholds[wk], 0.0)
        Z2 = crossbasis_panel(anom, design.ili, h_a, burn_in)
    return Z1, Z2
