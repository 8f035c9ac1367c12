"""Seasonal ARIMA regressions, copulas on their innovations, and joint simulation.

Each series follows a regression with SARIMA errors::

    y_t = x_t' beta + u_t
    phi(B) Phi(B^s) [(1 - B)^d (1 - B^s)^D u_t - c] = theta(B) Theta(B^s) e_t

Coefficients start from conditional sum of squares and are refined on the
exact Gaussian likelihood of the differenced series (autocovariances from
the psi-weights, prediction errors from the Durbin-Levinson recursion).
AR and MA polynomials are kept stationary/invertible through a
partial-autocorrelation (tanh) reparameterization.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, stats
from scipy.signal import lfilter

from .data_model import N_WEEKS

log = logging.getLogger(__name__)

STREAMS = {"fit-bootstrap": 0, "sim-temp": 1, "sim-ili": 2, "sim-kappa": 3, "nb-draws": 4}
ILI_SHIFT = 0.01
DF_GRID = (2.5, 3.0) + tuple(float(v) for v in range(4, 31)) + (np.inf,)


def substream(seed, name, path=0):
    """Generator for one named stream and path, independent of all others."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name], int(path)))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# polynomial helpers

def pacf_to_coef(x):
    """Map unconstrained values to the coefficients of a stationary AR polynomial."""
    phi = np.zeros(0)
    for rk in np.tanh(np.asarray(x, dtype=float)):
        phi = np.r_[phi - rk * phi[::-1], rk]
    return phi


def coef_to_pacf(phi):
    """Inverse of :func:`pacf_to_coef` for stationary coefficient vectors."""
    phi = np.asarray(phi, dtype=float).copy()
    r = np.zeros(phi.size)
    for k in range(phi.size - 1, -1, -1):
        rk = phi[k]
        if abs(rk) >= 1:
            raise ValueError("coefficients are not stationary/invertible")
        r[k] = rk
        phi = (phi[:k] + rk * phi[:k][::-1]) / (1 - rk * rk)
    return np.arctanh(r)


def _seasonal(coefs, s, sign):
    out = np.zeros(len(coefs) * s + 1)
    out[0] = 1.0
    for j, c in enumerate(coefs, start=1):
        out[j * s] = sign * c
    return out


def _diff_poly(d, D, s):
    poly = np.array([1.0])
    for _ in range(d):
        poly = np.convolve(poly, [1.0, -1.0])
    for _ in range(D):
        poly = np.convolve(poly, _seasonal([1.0], s, -1.0))
    return poly


@dataclass(frozen=True)
class SarimaxSpec:
    order: tuple = (1, 0, 1)
    seasonal: tuple = (0, 0, 0)
    period: int = N_WEEKS
    drift: bool = False
    regressors: tuple = ()

    def __post_init__(self):
        if len(self.order) != 3 or len(self.seasonal) != 3:
            raise ValueError("order and seasonal order need three entries")
        if min(self.order) < 0 or min(self.seasonal) < 0 or self.period < 1:
            raise ValueError("orders must be >= 0 and period >= 1")
        object.__setattr__(self, "order", tuple(int(v) for v in self.order))
        object.__setattr__(self, "seasonal", tuple(int(v) for v in self.seasonal))
        object.__setattr__(self, "regressors", tuple(self.regressors))

    @property
    def n_consumed(self):
        """Observations used up by differencing."""
        return self.order[1] + self.seasonal[1] * self.period

    @property
    def n_ar_lags(self):
        return self.order[0] + self.seasonal[0] * self.period

    def min_length(self):
        p, d, q = self.order
        P, D, Q = self.seasonal
        return p + q + (P + D + Q) * self.period + d + len(self.regressors) + 10

    def to_dict(self):
        return {"order": list(self.order), "seasonal": list(self.seasonal),
                "period": self.period, "drift": self.drift, "regressors": list(self.regressors)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d.get("order", (1, 0, 1))), tuple(d.get("seasonal", (0, 0, 0))),
                   int(d.get("period", N_WEEKS)), bool(d.get("drift", False)),
                   tuple(d.get("regressors", ())))


@dataclass(eq=False)
class SarimaxFit:
    spec: SarimaxSpec
    ar: np.ndarray
    ma: np.ndarray
    sar: np.ndarray
    sma: np.ndarray
    beta: np.ndarray
    const: float
    sigma2: float
    y: np.ndarray = field(default=None, repr=False)
    X: np.ndarray = field(default=None, repr=False)
    resid: np.ndarray = field(default=None, repr=False)   # aligned with y, NaN where undefined
    loglik: float = np.nan

    @classmethod
    def from_params(cls, spec, ar=(), ma=(), sar=(), sma=(), beta=(), const=0.0, sigma2=1.0):
        return cls(spec, np.asarray(ar, float), np.asarray(ma, float), np.asarray(sar, float),
                   np.asarray(sma, float), np.asarray(beta, float), float(const), float(sigma2))

    def ar_poly(self):
        """phi(B) Phi(B^s) as lag-polynomial coefficients, leading 1."""
        return np.convolve(np.r_[1.0, -self.ar], _seasonal(self.sar, self.spec.period, -1.0))

    def ma_poly(self):
        return np.convolve(np.r_[1.0, self.ma], _seasonal(self.sma, self.spec.period, 1.0))

    def full_ar_poly(self):
        """AR polynomial of u_t including differencing."""
        s = self.spec
        return np.convolve(self.ar_poly(), _diff_poly(s.order[1], s.seasonal[1], s.period))

    @property
    def std_resid(self):
        return self.resid / np.sqrt(self.sigma2)

    def coef_dict(self):
        return {"ar": self.ar.tolist(), "ma": self.ma.tolist(), "sar": self.sar.tolist(),
                "sma": self.sma.tolist(), "beta": self.beta.tolist(), "const": self.const,
                "sigma2": self.sigma2}

    def simulate(self, n, rng, burn=None, X=None):
        """Unconditional draw of length ``n`` (burn-in discarded)."""
        burn = 10 * (self.spec.n_ar_lags + self.spec.n_consumed + 10) if burn is None else burn
        A, B = self.full_ar_poly(), self.ma_poly()
        e = rng.standard_normal(n + burn) * np.sqrt(self.sigma2)
        k = self.const * self.ar_poly().sum()
        u = lfilter(B, A, e + 0.0) + lfilter([k], A, np.ones(n + burn))
        u = u[burn:]
        if X is not None and self.beta.size:
            u = u + np.asarray(X, float).reshape(n, -1) @ self.beta
        return u

    def paths(self, innov, X_future=None):
        """Continue the fitted series with given innovations.

        ``innov`` is (n_paths, H) on the innovation scale (already
        multiplied by sigma); ``X_future`` is (H, k) or (n_paths, H, k).
        Returns (n_paths, H) values of y.
        """
        innov = np.atleast_2d(np.asarray(innov, dtype=float))
        n_paths, H = innov.shape
        A, B = self.full_ar_poly(), self.ma_poly()
        na, nb = len(A) - 1, len(B) - 1
        k = self.const * self.ar_poly().sum()
        u_hist = self.y - (self.X @ self.beta if self.beta.size else 0.0)
        e_hist = np.nan_to_num(self.resid, nan=0.0)
        if u_hist.size < na:
            raise ValueError("history shorter than the AR polynomial")
        U = np.zeros((n_paths, na + H))
        U[:, :na] = u_hist[u_hist.size - na:] if na else 0.0
        E = np.zeros((n_paths, nb + H))
        if nb:
            E[:, :nb] = e_hist[e_hist.size - nb:]
        E[:, nb:] = innov
        a_rev = -A[1:][::-1]
        b_rev = B[1:][::-1]
        for h in range(H):
            val = k + innov[:, h]
            if na:
                val = val + U[:, h:h + na] @ a_rev
            if nb:
                val = val + E[:, h:h + nb] @ b_rev
            U[:, na + h] = val
        out = U[:, na:]
        if self.beta.size:
            if X_future is None:
                raise ValueError("regressor values needed for the forecast horizon")
            Xf = np.asarray(X_future, dtype=float)
            if Xf.ndim == 2:
                out = out + (Xf @ self.beta)[None]
            else:
                out = out + Xf @ self.beta
        return out


def _unpack(spec, x, k):
    p, _, q = spec.order
    P, _, Q = spec.seasonal
    i = 0
    ar = pacf_to_coef(x[i:i + p]); i += p
    ma = -pacf_to_coef(x[i:i + q]); i += q
    sar = pacf_to_coef(x[i:i + P]); i += P
    sma = -pacf_to_coef(x[i:i + Q]); i += Q
    beta = x[i:i + k]; i += k
    const = x[i] if spec.drift else 0.0
    return ar, ma, sar, sma, beta, const


def _css_resid(x, spec, zy, zX):
    k = zX.shape[1]
    ar, ma, sar, sma, beta, const = _unpack(spec, x, k)
    s = spec.period
    a = np.convolve(np.r_[1.0, -ar], _seasonal(sar, s, -1.0))
    b = np.convolve(np.r_[1.0, ma], _seasonal(sma, s, 1.0))
    w = zy - (zX @ beta if k else 0.0) - const
    m = len(a) - 1
    v = lfilter(a, [1.0], w)[m:]
    return lfilter([1.0], b, v)


def arma_acovf(a, b, n, sigma2=1.0, tol=1e-12, max_len=None):
    """Autocovariances 0..n-1 of the ARMA process a(B) w = b(B) e.

    Uses psi-weights truncated once they fall below ``tol`` relative to the
    largest weight.
    """
    max_len = max_len or 200 * max(n, 100)
    L = max(4 * n, 1024)
    while True:
        imp = np.zeros(L)
        imp[0] = 1.0
        psi = lfilter(b, a, imp)
        tail = np.max(np.abs(psi[-max(len(a), 2 * n):]))
        if tail < tol * np.max(np.abs(psi)) or L >= max_len:
            break
        L *= 4
    m = 1 << int(np.ceil(np.log2(2 * L)))
    f = np.fft.rfft(psi, m)
    acov = np.fft.irfft(f * np.conj(f), m)[:n]
    return sigma2 * acov


def durbin_levinson_loglik(gamma, w):
    """Exact Gaussian log-likelihood of ``w`` with autocovariances ``gamma``.

    Returns ``(loglik, standardized one-step errors)``.
    """
    n = w.size
    phi = np.zeros(n)
    v = gamma[0]
    errs = np.empty(n)
    vs = np.empty(n)
    errs[0], vs[0] = w[0], v
    for t in range(1, n):
        k = (gamma[t] - phi[:t - 1] @ gamma[t - 1:0:-1]) / v
        phi[:t - 1] = phi[:t - 1] - k * phi[:t - 1][::-1]
        phi[t - 1] = k
        v = v * (1.0 - k * k)
        if v <= 0:
            return -np.inf, None
        errs[t] = w[t] - phi[:t] @ w[t - 1::-1]
        vs[t] = v
    ll = -0.5 * np.sum(np.log(2 * np.pi * vs) + errs ** 2 / vs)
    return float(ll), errs / np.sqrt(vs)


def _exact_negloglik(x, spec, zy, zX):
    k = zX.shape[1]
    ar, ma, sar, sma, beta, const = _unpack(spec, x, k)
    s = spec.period
    a = np.convolve(np.r_[1.0, -ar], _seasonal(sar, s, -1.0))
    b = np.convolve(np.r_[1.0, ma], _seasonal(sma, s, 1.0))
    w = zy - (zX @ beta if k else 0.0) - const
    g = arma_acovf(a, b, w.size)
    # profile out the innovation variance
    ll1, e = durbin_levinson_loglik(g, w)
    if e is None or not np.isfinite(ll1):
        return 1e300
    s2 = np.mean(e ** 2)
    n = w.size
    return 0.5 * n * np.log(s2) - (ll1 + 0.5 * np.sum(e ** 2)) + 0.5 * n


def fit_sarimax(y, X=None, spec=SarimaxSpec(), x0=None, exact=True):
    """Conditional-sum-of-squares fit refined by exact Gaussian likelihood.

    Returns a :class:`SarimaxFit`; ``resid`` holds the conditional
    innovations at the final estimates, aligned with ``y``.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise ValueError("series and regressors must be finite")
    if n <= spec.min_length():
        raise ValueError(f"series of length {n} too short for {spec} (need > {spec.min_length()})")
    k = X.shape[1]
    dpoly = _diff_poly(spec.order[1], spec.seasonal[1], spec.period)
    nd = len(dpoly) - 1
    zy = lfilter(dpoly, [1.0], y)[nd:]
    zX = lfilter(dpoly, [1.0], X, axis=0)[nd:] if k else np.zeros((n - nd, 0))

    # OLS start for regression and drift
    design = np.column_stack([zX] + ([np.ones(zy.size)] if spec.drift else []))
    if design.shape[1]:
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise np.linalg.LinAlgError("regressor matrix is singular after differencing")
        coef, *_ = np.linalg.lstsq(design, zy, rcond=None)
    else:
        coef = np.zeros(0)
    n_arma = spec.order[0] + spec.order[2] + spec.seasonal[0] + spec.seasonal[2]
    if x0 is None:
        x0 = np.r_[np.full(n_arma, 0.1), coef]
        # MA starts on the opposite sign so the polynomials do not cancel
        p, q = spec.order[0], spec.order[2]
        P = spec.seasonal[0]
        x0[p:p + q] = -0.1
        x0[p + q + P:n_arma] = -0.1

    res = optimize.least_squares(_css_resid, x0, args=(spec, zy, zX), method="trf",
                                 x_scale="jac", xtol=1e-10, ftol=1e-12, gtol=1e-10)
    x = res.x
    if exact and n_arma:
        # keep the refinement away from the PACF-transform boundary
        x = np.r_[np.clip(x[:n_arma], -4.0, 4.0), x[n_arma:]]
        opt = optimize.minimize(_exact_negloglik, x, args=(spec, zy, zX), method="L-BFGS-B",
                                options={"maxiter": 200})
        if np.isfinite(opt.fun) and opt.fun <= _exact_negloglik(x, spec, zy, zX):
            x = opt.x
    e = _css_resid(x, spec, zy, zX)
    ar, ma, sar, sma, beta, const = _unpack(spec, x, k)
    sigma2 = float(np.mean(e ** 2))
    resid = np.full(n, np.nan)
    resid[n - e.size:] = e
    ll = -0.5 * e.size * (np.log(2 * np.pi * sigma2) + 1.0)
    return SarimaxFit(spec, ar, ma, sar, sma, np.asarray(beta, float), float(const), sigma2,
                      y, X, resid, ll)


# ---------------------------------------------------------------------------
# copulas

@dataclass(frozen=True, eq=False)
class CopulaModel:
    family: str
    corr: np.ndarray
    df: float = np.inf
    repaired: bool = False

    def __post_init__(self):
        if self.family not in ("gaussian", "student-t"):
            raise ValueError(f"unknown copula family {self.family!r}")
        if self.family == "student-t" and not self.df > 2:
            raise ValueError("t-copula degrees of freedom must exceed 2")

    def normal_scores(self, rng, n):
        """Draws with standard-normal margins and the copula's dependence, (n, R)."""
        L = np.linalg.cholesky(self.corr)
        z = rng.standard_normal((n, self.corr.shape[0])) @ L.T
        if self.family == "gaussian" or not np.isfinite(self.df):
            return z
        w = np.sqrt(self.df / rng.chisquare(self.df, n))
        u = stats.t.cdf(z * w[:, None], self.df)
        return stats.norm.ppf(np.clip(u, 1e-16, 1 - 1e-16))

    def uniforms(self, rng, n):
        return stats.norm.cdf(self.normal_scores(rng, n))

    def to_dict(self):
        return {"family": self.family, "corr": self.corr.tolist(),
                "df": None if not np.isfinite(self.df) else self.df, "repaired": self.repaired}

    @classmethod
    def from_dict(cls, d):
        df = d.get("df")
        return cls(d["family"], np.asarray(d["corr"], float),
                   np.inf if df is None else float(df), bool(d.get("repaired", False)))


def pseudo_observations(x):
    x = np.asarray(x, dtype=float)
    return stats.rankdata(x, axis=0) / (x.shape[0] + 1.0)


def nearest_pd_corr(c, floor=1e-6):
    """Clip eigenvalues at ``floor`` and rescale to unit diagonal."""
    c = 0.5 * (c + c.T)
    vals, vecs = np.linalg.eigh(c)
    if vals.min() >= floor:
        return c, False
    c2 = (vecs * np.maximum(vals, floor)) @ vecs.T
    d = np.sqrt(np.diag(c2))
    c2 = c2 / np.outer(d, d)
    np.fill_diagonal(c2, 1.0)
    return c2, True


def kendall_corr(x):
    R = x.shape[1]
    c = np.eye(R)
    for i in range(R):
        for j in range(i + 1, R):
            tau = stats.kendalltau(x[:, i], x[:, j]).statistic
            c[i, j] = c[j, i] = np.clip(np.sin(np.pi * tau / 2), -1 + 1e-6, 1 - 1e-6)
    return c


def t_copula_loglik(u, corr, df):
    if not np.isfinite(df):
        z = stats.norm.ppf(u)
        mv = stats.multivariate_normal(np.zeros(corr.shape[0]), corr, allow_singular=True)
        return float(np.sum(mv.logpdf(z) - stats.norm.logpdf(z).sum(axis=1)))
    x = stats.t.ppf(u, df)
    mv = stats.multivariate_t(np.zeros(corr.shape[0]), corr, df=df, allow_singular=True)
    return float(np.sum(mv.logpdf(x) - stats.t.logpdf(x, df).sum(axis=1)))


def fit_copula(innov, family="student-t", df_grid=DF_GRID, min_obs=100):
    """Rank-based copula fit on a (time, series) innovation matrix."""
    x = np.asarray(innov, dtype=float)
    x = x[np.all(np.isfinite(x), axis=1)]
    if x.shape[0] < 2:
        raise ValueError("need at least two joint observations")
    if x.shape[0] < min_obs:
        warnings.warn(f"copula fitted on {x.shape[0]} joint observations (< {min_obs})")
    corr, repaired = nearest_pd_corr(kendall_corr(x))
    if repaired:
        log.warning("Kendall-tau correlation repaired to be positive definite")
    if family == "gaussian":
        return CopulaModel("gaussian", corr, np.inf, repaired)
    u = pseudo_observations(x)
    ll = [t_copula_loglik(u, corr, df) for df in df_grid]
    df = df_grid[int(np.argmax(ll))]
    return CopulaModel("student-t", corr, df, repaired)


# ---------------------------------------------------------------------------
# driver layers

TEMP_SPEC = SarimaxSpec((1, 0, 1), (1, 1, 1), N_WEEKS, False, ())
ILI_SPEC = SarimaxSpec((1, 0, 1), (1, 1, 1), N_WEEKS, False, ("tavg",))
KAPPA_SPEC = SarimaxSpec((0, 1, 1), (0, 0, 0), 1, True, ("tavg_annual", "ili_annual"))


@dataclass(eq=False)
class DriverModels:
    temp: list
    ili: list
    kappa: list
    temp_copula: CopulaModel
    ili_copula: CopulaModel
    kappa_copula: CopulaModel

    def summary(self):
        rows = []
        for layer, fits in (("temp", self.temp), ("ili", self.ili), ("kappa", self.kappa)):
            for r, f in enumerate(fits):
                if f is None:
                    continue
                rows.append({"layer": layer, "region": r, **{k: v if np.isscalar(v) else
                             ";".join(f"{c:.6g}" for c in v) for k, v in f.coef_dict().items()}})
        return pd.DataFrame(rows)


def annual_means(weekly, weeks=N_WEEKS):
    w = np.asarray(weekly, dtype=float)
    return w.reshape(-1, weeks, *w.shape[1:]).mean(axis=1)


def _aligned(resids):
    m = np.column_stack(resids)
    return m[np.all(np.isfinite(m), axis=1)]


def fit_drivers(tavg, ili, kappa=None, temp_spec=TEMP_SPEC, ili_spec=ILI_SPEC,
                kappa_spec=KAPPA_SPEC, temp_family="student-t", ili_family="student-t",
                kappa_family="gaussian"):
    """Fit the three driver layers per region.

    ``tavg`` and ``ili`` are (n_weeks, R) raw weekly series; ``kappa`` is
    (n_years, R) or None to skip the mortality-index layer.
    """
    tavg = np.asarray(tavg, dtype=float)
    ili = np.asarray(ili, dtype=float)
    R = tavg.shape[1]
    temp = [fit_sarimax(tavg[:, r], None, temp_spec) for r in range(R)]
    ili_fits = [fit_sarimax(np.log(ili[:, r] + ILI_SHIFT), tavg[:, [r]], ili_spec)
                for r in range(R)]
    tc = fit_copula(_aligned([f.std_resid for f in temp]), temp_family)
    ic = fit_copula(_aligned([f.std_resid for f in ili_fits]), ili_family)
    kfits, kc = [], CopulaModel("gaussian", np.eye(R))
    if kappa is not None:
        kappa = np.asarray(kappa, dtype=float)
        Xk = np.stack([annual_means(tavg), annual_means(ili)], axis=-1)   # (years, R, 2)
        kfits = [fit_sarimax(kappa[:, r], Xk[:, r], kappa_spec) for r in range(R)]
        # annual series are short by nature; no minimum-sample warning here
        kc = fit_copula(_aligned([f.std_resid for f in kfits]), kappa_family, min_obs=0)
    return DriverModels(temp, ili_fits, kfits, tc, ic, kc)


def _innovations(copula, fits, seed, stream, n_sims, n_steps, zero):
    R = len(fits)
    out = np.zeros((n_sims, n_steps, R))
    if zero:
        return out
    sd = np.array([np.sqrt(f.sigma2) for f in fits])
    for i in range(n_sims):
        out[i] = copula.normal_scores(substream(seed, stream, i), n_steps) * sd
    return out


def simulate_joint(models, horizon, n_sims, seed, zero_innovations=False, with_kappa=True):
    """Simulate temperature -> ILI -> kappa paths.

    Returns a dict with ``tavg`` and ``ili`` of shape (n_sims, H, R) and,
    when requested, ``kappa`` of shape (n_sims, ceil(H/52), R).
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    if n_sims <= 0:
        raise ValueError("n_sims must be positive")
    R = len(models.temp)
    H = int(horizon)
    e_t = _innovations(models.temp_copula, models.temp, seed, "sim-temp", n_sims, H,
                       zero_innovations)
    tavg = np.stack([models.temp[r].paths(e_t[:, :, r]) for r in range(R)], axis=-1)
    e_i = _innovations(models.ili_copula, models.ili, seed, "sim-ili", n_sims, H,
                       zero_innovations)
    log_ili = np.stack([models.ili[r].paths(e_i[:, :, r], tavg[:, :, [r]]) for r in range(R)],
                       axis=-1)
    ili = np.maximum(np.exp(log_ili) - ILI_SHIFT, 0.0)
    out = {"tavg": tavg, "ili": ili}
    if with_kappa and models.kappa:
        n_years = -(-H // N_WEEKS)
        pad = n_years * N_WEEKS - H
        t_ext = np.concatenate([tavg, np.repeat(tavg[:, -1:], pad, axis=1)], axis=1)
        i_ext = np.concatenate([ili, np.repeat(ili[:, -1:], pad, axis=1)], axis=1)
        Xk = np.stack([annual_means(t_ext.transpose(1, 0, 2)).transpose(1, 0, 2),
                       annual_means(i_ext.transpose(1, 0, 2)).transpose(1, 0, 2)], axis=-1)
        e_k = _innovations(models.kappa_copula, models.kappa, seed, "sim-kappa", n_sims,
                           n_years, zero_innovations)
        out["kappa"] = np.stack([models.kappa[r].paths(e_k[:, :, r], Xk[:, :, r])
                                 for r in range(R)], axis=-1)
    return out


def simulate_kappa(models, tavg, ili, n_sims, seed, zero_innovations=False):
    """kappa paths driven by given (observed) weekly covariates of shape (H, R)."""
    R = len(models.kappa)
    tavg = np.asarray(tavg, float)
    ili = np.asarray(ili, float)
    n_years = tavg.shape[0] // N_WEEKS
    Xk = np.stack([annual_means(tavg), annual_means(ili)], axis=-1)
    e_k = _innovations(models.kappa_copula, models.kappa, seed, "sim-kappa", n_sims, n_years,
                       zero_innovations)
    return np.stack([models.kappa[r].paths(e_k[:, :, r], Xk[:, r]) for r in range(R)], axis=-1)


def paths_frame(paths, regions=None, start_week=1):
    """Long-format table: path_id, t, isoweek, region, variable, value."""
    frames = []
    for name, arr in paths.items():
        n, H, R = arr.shape
        p, t, r = np.meshgrid(np.arange(n), np.arange(H), np.arange(R), indexing="ij")
        step = N_WEEKS if name == "kappa" else 1
        wk = np.zeros_like(t) if name == "kappa" else (start_week - 1 + t) % N_WEEKS + 1
        frames.append(pd.DataFrame({
            "path_id": p.ravel(), "t": (t * step).ravel(), "isoweek": wk.ravel(),
            "region": (np.asarray(regions)[r.ravel()] if regions is not None else r.ravel()),
            "variable": name, "value": arr.ravel()}))
    return pd.concat(frames, ignore_index=True)
