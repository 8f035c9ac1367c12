"""Point and probabilistic forecast scores and Pearson goodness of fit.

Tensors are indexed ``[age, ...]``: per-age scores average over every
remaining axis and the overall score averages over all cells.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
from scipy import stats

from .likelihood import log_mu

LOGS_FLOOR = 1e-6
CHI2_1_95 = 3.841458820694124


def _per_age(values):
    v = np.asarray(values, dtype=float)
    flat = v.reshape(v.shape[0], -1)
    return flat.mean(axis=1), float(flat.mean())


def point_scores(observed, forecast):
    """RMSE and MAE per age and overall: dicts of (per_age array, overall)."""
    err = np.asarray(observed, dtype=float) - np.asarray(forecast, dtype=float)
    mse_x, mse = _per_age(err ** 2)
    mae_x, mae = _per_age(np.abs(err))
    return {"rmse": (np.sqrt(mse_x), float(np.sqrt(mse))), "mae": (mae_x, mae)}


def crps_sample(samples, observed):
    """Sample CRPS mean|X - d| - 0.5 mean|X - X'| over the leading axis.

    Uses the sorted-sample form of the pairwise term, so the cost is
    O(n log n) per cell.
    """
    x = np.sort(np.asarray(samples, dtype=float), axis=0)
    d = np.asarray(observed, dtype=float)
    n = x.shape[0]
    term1 = np.abs(x - d[None]).mean(axis=0)
    # sum_{i,j} |x_i - x_j| = 2 sum_i (2i - n - 1) x_(i), i = 1..n
    w = (2.0 * np.arange(1, n + 1) - n - 1).reshape((n,) + (1,) * (x.ndim - 1))
    term2 = 2.0 * (w * x).sum(axis=0) / (n * n)
    return term1 - 0.5 * term2


def log_score(samples, observed, floor=LOGS_FLOOR):
    """Negative log of the empirical pmf at the observed count (floored)."""
    s = np.asarray(samples)
    d = np.asarray(observed)
    p = (s == d[None]).mean(axis=0)
    return -np.log(np.maximum(p, floor))


def probabilistic_scores(observed, samples, floor=LOGS_FLOOR, min_samples=100):
    """CRPS and LogS per age and overall from (S, X, ...) sample paths."""
    samples = np.asarray(samples)
    if samples.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples per cell")
    crps_x, crps = _per_age(crps_sample(samples, observed))
    logs_x, logs = _per_age(log_score(samples, observed, floor))
    return {"crps": (crps_x, crps), "logs": (logs_x, logs)}


def interval_score(observed, lower, upper, alpha=0.05):
    d = np.asarray(observed, dtype=float)
    lo = np.asarray(lower, dtype=float)
    up = np.asarray(upper, dtype=float)
    if np.any(lo > up):
        raise ValueError("lower bound exceeds upper bound")
    return ((up - lo) + (2.0 / alpha) * (lo - d) * (d < lo)
            + (2.0 / alpha) * (d - up) * (d > up))


def interval_scores(observed, lower, upper, alpha=0.05):
    """Coverage and interval score per age and overall."""
    d = np.asarray(observed, dtype=float)
    inside = (d >= lower) & (d <= upper)
    cov_x, cov = _per_age(inside)
    is_x, is_ = _per_age(interval_score(d, lower, upper, alpha))
    return {"coverage": (cov_x, cov), "interval_score": (is_x, is_)}


def pearson_residuals(deaths, exposures, log_mu_hat, phi, edf=None):
    """Squared Pearson residuals under the fitted NB model.

    ``phi`` broadcasts against ``deaths`` (typically (X, 1, 1, R)).
    Returns a dict with the residual tensor, its sum, the fraction above
    the chi-square(1) 95th percentile and, when ``edf`` is given, the
    chi-square(N - edf) 95th-percentile threshold for the sum.
    """
    d = np.asarray(deaths, dtype=float)
    m = np.asarray(exposures, dtype=float) * np.exp(log_mu_hat)
    rho2 = (d - m) ** 2 / (m + m ** 2 / phi)
    out = {"rho2": rho2, "aggregate": float(rho2.sum()),
           "exceed_fraction": float(np.mean(rho2 > CHI2_1_95)), "n": int(rho2.size)}
    if edf is not None:
        dof = rho2.size - edf
        out["dof"] = float(dof)
        out["threshold"] = float(stats.chi2.ppf(0.95, dof))
        out["below_threshold"] = out["aggregate"] < out["threshold"]
    return out


def fit_pearson(fit, data):
    """Pearson residual summary for a fitted model on its calibration data."""
    phi = fit.theta.dispersion[:, None, None, :]
    return pearson_residuals(data.deaths, data.exposures, log_mu(fit.theta, data), phi,
                             fit.edf)


def scores_frame(model, observed, forecast_set, ages=None, alpha=0.05):
    """Long table (model, age_group, metric, value) for one forecast set."""
    obs = np.asarray(observed, dtype=float)
    res = dict(point_scores(obs, forecast_set.point))
    if forecast_set.samples is not None:
        res.update(probabilistic_scores(obs, forecast_set.samples))
        lo, up = forecast_set.quantiles((alpha / 2, 1 - alpha / 2))
        res.update(interval_scores(obs, lo, up, alpha))
    X = obs.shape[0]
    labels = list(ages) if ages is not None else list(range(X))
    rows = []
    for metric, (per_age, overall) in res.items():
        for lab, v in zip(labels, per_age):
            rows.append((model, lab, metric, float(v)))
        rows.append((model, "overall", metric, float(overall)))
    if forecast_set.samples is not None:
        rows.append((model, "overall", "logs_floor", LOGS_FLOOR))
    return pd.DataFrame(rows, columns=["model", "age_group", "metric", "value"])


def compare_scores(scores, reference, rtol=0.05):
    """Join a scores table with reference values on (model, age_group, metric).

    Adds ``target``, ``rel_diff`` and ``within`` (|rel_diff| <= rtol); rows
    without a reference value are dropped.
    """
    ref = reference.rename(columns={"value": "target"})
    keys = ["model", "age_group", "metric"]
    s = scores.assign(age_group=scores.age_group.astype(str))
    ref = ref.assign(age_group=ref.age_group.astype(str))
    out = s.merge(ref[keys + ["target"]], on=keys, how="inner")
    out["rel_diff"] = (out.value - out.target) / out.target.abs()
    out["within"] = out.rel_diff.abs() <= rtol
    return out
