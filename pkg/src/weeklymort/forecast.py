"""Forecasted forces of mortality, death-count samples and prediction intervals.

Horizons always start at ISO week 1 of the year after the last observed
year, so forecast step ``h`` is week ``h % 52 + 1`` of forecast year
``h // 52``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .crossbasis import DesignSpec, crossbasis_panel
from .data_model import N_WEEKS
from .estimation import FitConfig, fit_model
from .likelihood import ModelData, NumericalError
from .timeseries import (
    KAPPA_SPEC,
    CopulaModel,
    SarimaxSpec,
    annual_means,
    fit_copula,
    fit_drivers,
    fit_sarimax,
    simulate_joint,
    substream,
)

log = logging.getLogger(__name__)

MODES = ("model1", "model2", "model3", "model4", "model5")
DEFAULT_LEVELS = (0.025, 0.5, 0.975)
MAX_MEAN = 1e12


@dataclass(eq=False)
class ForecastSet:
    mode: str
    log_mu: np.ndarray        # (S, X, H, R)
    exposures: np.ndarray     # (X, H, R)
    samples: np.ndarray | None = None   # (S, X, H, R) integer counts
    point: np.ndarray | None = None     # (X, H, R) expected deaths from mean driver paths
    start_year: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self):
        return self.log_mu.shape[2]

    def expected(self):
        """Expected deaths per path, E * mu."""
        return self.exposures[None] * np.exp(self.log_mu)

    def quantiles(self, levels=DEFAULT_LEVELS):
        if self.samples is None:
            raise ValueError("no death samples drawn")
        return prediction_intervals(self.samples, levels)

    def frame(self, ages=None, regions=None):
        """Summary table with columns age,region,year,isoweek,mean,q025,q500,q975."""
        q = self.quantiles(DEFAULT_LEVELS)
        X, H, R = self.exposures.shape
        mean = self.point if self.point is not None else self.samples.mean(axis=0)
        x, h, r = np.meshgrid(np.arange(X), np.arange(H), np.arange(R), indexing="ij")
        return pd.DataFrame({
            "age": np.asarray(ages, dtype=object)[x.ravel()] if ages is not None else x.ravel(),
            "region": np.asarray(regions)[r.ravel()] if regions is not None else r.ravel(),
            "year": self.start_year + h.ravel() // N_WEEKS,
            "isoweek": h.ravel() % N_WEEKS + 1,
            "mean": mean.ravel(), "q025": q[0].ravel(), "q500": q[1].ravel(),
            "q975": q[2].ravel()})

    def save(self, prefix):
        """Write ``<prefix>_samples.npy``, ``_point.npy``, ``_exposures.npy`` and ``.json``.

        Plain .npy files keep artifact hashes reproducible.
        """
        prefix = str(prefix)
        np.save(prefix + "_exposures.npy", self.exposures)
        if self.samples is not None:
            np.save(prefix + "_samples.npy", self.samples)
        if self.point is not None:
            np.save(prefix + "_point.npy", self.point)
        meta = {k: v for k, v in self.meta.items() if isinstance(v, (int, float, str, list))}
        with open(prefix + ".json", "w") as fh:
            json.dump({"mode": self.mode, "start_year": self.start_year,
                       "horizon": int(self.exposures.shape[1]), "meta": meta}, fh, indent=1)

    @classmethod
    def load(cls, prefix):
        """Reload a saved set; log-mu paths are not stored and come back empty."""
        prefix = str(prefix)
        with open(prefix + ".json") as fh:
            d = json.load(fh)
        E = np.load(prefix + "_exposures.npy")
        samples = np.load(prefix + "_samples.npy") if os.path.exists(prefix + "_samples.npy") else None
        point = np.load(prefix + "_point.npy") if os.path.exists(prefix + "_point.npy") else None
        return cls(d["mode"], np.zeros((0,) + E.shape), E, samples, point, int(d["start_year"]),
                   d.get("meta", {}))


def future_exposures(exposures, horizon, future=None):
    """Forecast exposures (X, H, R).

    Without ``future`` the last regular observed week is held constant
    (week 52 may carry a folded ISO week 53); otherwise
    ``future`` (X, n_years, 52, R) supplies interpolated exposures.
    """
    if future is not None:
        f = np.asarray(future, dtype=float)
        X, T, W, R = f.shape
        if T * W < horizon:
            raise ValueError(f"future exposures cover {T * W} weeks, horizon is {horizon}")
        return f.reshape(X, T * W, R)[:, :horizon]
    last = np.asarray(exposures, dtype=float)[:, -1, N_WEEKS - 2, :]
    return np.repeat(last[:, None, :], horizon, axis=1)


def _as_paths(a, n_sims=None):
    a = np.asarray(a, dtype=float)
    if a.ndim == 2:
        a = a[None]
    if n_sims is not None and a.shape[0] == 1 and n_sims > 1:
        a = np.broadcast_to(a, (n_sims,) + a.shape[1:])
    return a


def dlnm_contributions(theta, design, tavg, ili, history):
    """Per-path DLNM terms (F1, F2), each (S, H, R).

    ``tavg``/``ili`` are forecast-horizon covariates (S, H, R) or (H, R);
    ``history`` is a pair of (n_hist, R) observed arrays ending right before
    the horizon (None uses burn-in padding, as in the calibration fit).
    """
    tavg = _as_paths(tavg)
    ili = _as_paths(ili, tavg.shape[0])
    tavg = _as_paths(tavg, ili.shape[0])
    S, H, R = tavg.shape
    F1 = np.zeros((S, H, R))
    F2 = np.zeros((S, H, R))
    h_t = h_i = None
    if history is not None:
        h_t, h_i = (np.asarray(v, dtype=float) for v in history)
    need = max([s.max_lag for s in design.temp or ()] + [design.ili.max_lag if design.ili else 0])
    if history is not None and min(len(h_t), len(h_i)) < need:
        raise ValueError(f"need {need} weeks of covariate history for the lag structure")
    wk = np.arange(H) % N_WEEKS
    h_a = None
    if design.ili is not None and h_i is not None:
        hw = np.arange(-len(h_i), 0) % N_WEEKS
        h_a = np.maximum(h_i - design.ili_thresholds[hw], 0.0)
    for s in range(S):
        if design.temp is not None and theta.eta1.size:
            Z = crossbasis_panel(tavg[s], list(design.temp), h_t)
            F1[s] = np.einsum("rhq,rq->hr", Z, theta.eta1)
        if design.ili is not None and theta.eta2.size:
            anom = np.maximum(ili[s] - design.ili_thresholds[wk], 0.0)
            Z = crossbasis_panel(anom, design.ili, h_a)
            F2[s] = np.einsum("rhq,rq->hr", Z, theta.eta2)
    return F1, F2


def forecast_mu(theta, kappa, horizon, design=None, tavg=None, ili=None, history=None,
                week_effect=True):
    """Log force of mortality paths (S, X, H, R).

    ``kappa`` holds annual index paths (S, n_years, R) or (n_years, R);
    each annual value applies to all 52 weeks of its year. DLNM terms are
    added when a ``design`` and covariate paths are supplied.
    """
    H = int(horizon)
    if H <= 0:
        raise ValueError("horizon must be positive")
    kappa = _as_paths(kappa)
    n_years = -(-H // N_WEEKS)
    if kappa.shape[1] < n_years:
        raise ValueError(f"kappa covers {kappa.shape[1]} years, horizon needs {n_years}")
    yr = np.arange(H) // N_WEEKS
    wk = np.arange(H) % N_WEEKS
    k = kappa[:, yr, :]                                        # (S, H, R)
    out = theta.alpha[None, :, None, :] + theta.beta[None, :, None, None] * k[:, None]
    if week_effect:
        out = out + theta.gamma[None, :, None, None] * theta.lam[wk][None, None]
    if design is not None and tavg is not None and (theta.eta1.size or theta.eta2.size):
        F1, F2 = dlnm_contributions(theta, design, np.asarray(tavg)[..., :H, :],
                                    np.asarray(ili)[..., :H, :], history)
        out = out + (theta.delta[None, :, None, None] * F1[:, None]
                     + theta.epsilon[None, :, None, None] * F2[:, None])
    return np.ascontiguousarray(out)


def sample_deaths(log_mu, exposures, phi, seed, path=0):
    """NB draws with mean E*mu and dispersion phi (X, R), same shape as ``log_mu``."""
    log_mu = np.asarray(log_mu, dtype=float)
    X, R = np.shape(phi)
    if log_mu.shape[-3] != X or log_mu.shape[-1] != R:
        raise ValueError("dispersion shape does not match the mu paths")
    with np.errstate(over="ignore"):
        m = np.asarray(exposures, dtype=float) * np.exp(log_mu)
    if np.isnan(m).any():
        raise NumericalError("forecast mean is NaN")
    n_big = int(np.count_nonzero(m > MAX_MEAN))
    if n_big:
        # far-tail driver paths can push the linear ILI term beyond what the
        # sampler accepts
        log.warning("%d forecast means above %.0e capped", n_big, MAX_MEAN)
        m = np.minimum(m, MAX_MEAN)
    p = np.asarray(phi, dtype=float)[:, None, :]
    rng = substream(seed, "nb-draws", path)
    return rng.negative_binomial(np.broadcast_to(p, m.shape), p / (p + m))


def prediction_intervals(samples, levels=(0.025, 0.975), min_sims=100):
    """Empirical type-7 quantiles over the leading (simulation) axis."""
    samples = np.asarray(samples)
    if samples.shape[0] < min_sims:
        raise ValueError(f"need at least {min_sims} simulations, got {samples.shape[0]}")
    return np.quantile(samples, np.asarray(levels, float), axis=0, method="linear")


def _draw_params(fit, n_sims, rng, scale=1.0):
    lay = fit.layout()
    cov = scale * np.asarray(fit.covariance, dtype=float)
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if vals.size and vals.min() < -1e-8 * max(1.0, abs(vals).max()):
        raise NumericalError(f"covariance is not PSD (eigenvalue {vals.min():.3g})")
    factor = vecs * np.sqrt(np.clip(vals, 0.0, None))
    u = lay.pack(fit.theta)[None] + rng.standard_normal((n_sims, lay.n_free)) @ factor.T
    offset = np.concatenate([lay.maps[b].offset for b in lay.blocks])
    full = offset[None] + u @ lay.transform().T
    return lay, full


def insample_bounds(fit, data, n_sims=10_000, seed=0, levels=(0.025, 0.975), cov_scale=1.0):
    """Bounds on in-sample deaths from parameter and NB sampling uncertainty.

    Returns an array (len(levels), X, T, W, R).
    """
    lay, full = _draw_params(fit, n_sims, substream(seed, "fit-bootstrap"), cov_scale)
    X, T, W, R = data.deaths.shape
    S = full.shape[0]

    def blk(name):
        if name not in lay.blocks:
            return None
        return full[:, lay.full_slices[name]].reshape((S,) + lay.maps[name].shape)

    alpha, beta, kappa = blk("alpha"), blk("beta"), blk("kappa")
    gamma, lam = blk("gamma"), blk("lam")
    delta, eta1, eps, eta2 = blk("delta"), blk("eta1"), blk("epsilon"), blk("eta2")
    phi = np.exp(blk("phi_x")[:, :, None] + blk("phi_r")[:, None, :])    # (S, X, R)
    t_idx = np.repeat(np.arange(T), W)
    w_idx = np.tile(np.arange(W), T)
    out = np.empty((len(levels), X, T, W, R))
    for r in range(R):
        F1 = eta1[:, r] @ data.Z1[r].T if eta1 is not None else 0.0      # (S, T*W)
        F2 = eta2[:, r] @ data.Z2[r].T if eta2 is not None else 0.0
        for x in range(X):
            eta = alpha[:, x, r, None] + beta[:, x, None] * kappa[:, t_idx, r]
            if gamma is not None:
                eta = eta + gamma[:, x, None] * lam[:, w_idx, r]
            if delta is not None:
                eta = eta + delta[:, x, None] * F1
            if eps is not None:
                eta = eta + eps[:, x, None] * F2
            m = data.exposures[x, :, :, r].ravel()[None] * np.exp(eta)
            p = phi[:, x, r, None]
            rng = substream(seed, "nb-draws", 1 + x * R + r)
            d = rng.negative_binomial(np.broadcast_to(p, m.shape), p / (p + m))
            q = np.quantile(d, np.asarray(levels, float), axis=0, method="linear")
            out[:, x, :, :, r] = q.reshape(len(levels), T, W)
    return out


def coverage(observed, lower, upper):
    obs = np.asarray(observed)
    return float(np.mean((obs >= lower) & (obs <= upper)))


# ---------------------------------------------------------------------------
# model structures 1-5

BASE_KAPPA_SPEC = SarimaxSpec((0, 1, 1), (0, 0, 0), 1, True, ())


def benchmark_data(panel, mode):
    """ModelData for the baseline structures (models 1-3)."""
    if mode == "model1":
        return ModelData.from_panel(panel, week_effect=False)
    if mode == "model2":
        return ModelData.from_panel(panel.national())
    if mode == "model3":
        return ModelData.from_panel(panel)
    raise ValueError(f"{mode} is not a baseline structure")


def fit_kappa_layer(kappa_hat, spec=BASE_KAPPA_SPEC, X=None):
    """Per-region index models and a Gaussian copula on their innovations."""
    kappa_hat = np.asarray(kappa_hat, dtype=float)
    R = kappa_hat.shape[1]
    fits = [fit_sarimax(kappa_hat[:, r], None if X is None else X[:, r], spec)
            for r in range(R)]
    m = np.column_stack([f.std_resid for f in fits])
    m = m[np.all(np.isfinite(m), axis=1)]
    cop = fit_copula(m, "gaussian", min_obs=0) if R > 1 else CopulaModel("gaussian", np.eye(1))
    return fits, cop


def _kappa_paths(fits, copula, n_years, n_sims, seed, zero, X_future=None):
    R = len(fits)
    e = np.zeros((n_sims, n_years, R))
    if not zero:
        sd = np.array([np.sqrt(f.sigma2) for f in fits])
        for i in range(n_sims):
            e[i] = copula.normal_scores(substream(seed, "sim-kappa", i), n_years) * sd
    return np.stack([fits[r].paths(e[:, :, r], None if X_future is None else X_future[:, :, r])
                     for r in range(R)], axis=-1)


def forecast_model(mode, horizon, n_sims, seed, panel, fit=None, covariates=None,
                   observed=None, drivers=None, future_exposure=None, config=None):
    """Forecast one model structure end to end.

    ``panel``/``covariates`` are the calibration data, ``fit`` the full
    DLNM fit (models 4 and 5), ``observed`` a CovariatePanel spanning the
    horizon (model 5) and ``drivers`` pre-fitted DriverModels (model 4,
    fitted here when absent). Returns a ForecastSet with death samples.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    H = int(horizon)
    if H <= 0:
        raise ValueError("horizon must be positive")
    n_years = -(-H // N_WEEKS)
    E = future_exposures(panel.exposures, H, future_exposure)
    start_year = panel.index.years[-1] + 1
    design = history = None
    tavg_paths = ili_paths = t_point = i_point = None

    if mode in ("model1", "model2", "model3"):
        data = benchmark_data(panel, mode)
        res = fit_model(data, config=config or FitConfig())
        theta, week_effect = res.theta, data.week_effect
        kfits, kcop = fit_kappa_layer(theta.kappa)
        kappa = _kappa_paths(kfits, kcop, n_years, n_sims, seed, False)
        k_point = _kappa_paths(kfits, kcop, n_years, 1, seed, True)
    else:
        if fit is None or covariates is None:
            raise ValueError(f"{mode} needs the DLNM fit and calibration covariates")
        theta, week_effect = fit.theta, fit.week_effect
        design = DesignSpec.from_dict(fit.meta["design"])
        t_hist, i_hist = covariates.flat("tavg"), covariates.flat("ili")
        history = (t_hist, i_hist)
        if mode == "model4":
            drivers = drivers or fit_drivers(t_hist, i_hist, theta.kappa)
            sims = simulate_joint(drivers, H, n_sims, seed)
            mean = simulate_joint(drivers, H, 1, seed, zero_innovations=True)
            tavg_paths, ili_paths, kappa = sims["tavg"], sims["ili"], sims["kappa"]
            t_point, i_point, k_point = mean["tavg"], mean["ili"], mean["kappa"]
        else:
            if observed is None:
                raise ValueError("model5 needs observed covariates over the horizon")
            t_obs, i_obs = observed.flat("tavg"), observed.flat("ili")
            if t_obs.shape[0] < n_years * N_WEEKS:
                raise ValueError("observed covariates do not cover the horizon")
            Xk = np.stack([annual_means(t_hist), annual_means(i_hist)], axis=-1)
            kfits, kcop = fit_kappa_layer(theta.kappa, KAPPA_SPEC, Xk)
            Xf = np.stack([annual_means(t_obs[:n_years * N_WEEKS]),
                           annual_means(i_obs[:n_years * N_WEEKS])], axis=-1)
            kappa = _kappa_paths(kfits, kcop, n_years, n_sims, seed, False,
                                 np.broadcast_to(Xf, (n_sims,) + Xf.shape))
            k_point = _kappa_paths(kfits, kcop, n_years, 1, seed, True, Xf[None])
            tavg_paths = t_point = t_obs[:H]
            ili_paths = i_point = i_obs[:H]

    log_mu = forecast_mu(theta, kappa, H, design, tavg_paths, ili_paths, history, week_effect)
    log_pt = forecast_mu(theta, k_point, H, design, t_point, i_point, history, week_effect)[0]
    phi = theta.dispersion
    if mode == "model2":
        R = panel.deaths.shape[3]
        log_mu = np.repeat(log_mu, R, axis=-1)
        log_pt = np.repeat(log_pt, R, axis=-1)
        phi = np.repeat(phi, R, axis=-1)
    samples = sample_deaths(log_mu, E[None], phi, seed).astype(np.int64)
    return ForecastSet(mode, log_mu, E, samples, E * np.exp(log_pt), start_year,
                       {"n_sims": int(n_sims), "seed": int(seed)})
