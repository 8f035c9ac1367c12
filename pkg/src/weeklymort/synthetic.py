"""Ground-truth panels drawn from the model itself.

Covariates are generated at their raw resolution (daily gridded
temperature, weekly ILI rates) and pushed through the same ingestion code
used for real data, so synthetic inputs also serve as CSV fixtures.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .basis import eval_basis
from .crossbasis import DesignSpec, default_design, design_matrices
from .data_model import N_WEEKS, CovariatePanel, MortalityPanel, PanelIndex, RegionGraph
from .ingest import (AnnualPopulation, GriddedDaily, aggregate_temperature,
                     interpolate_exposure, iso_week_start, n_iso_weeks)
from .likelihood import ModelData, ParamSet, log_mu


@dataclass(frozen=True)
class SynthConfig:
    n_ages: int = 5
    n_years: int = 20
    n_regions: int = 4
    start_year: int = 2000
    population: float = 1e6
    alpha_range: tuple = (-6.5, -3.0)
    lambda_amp: float = 0.15
    kappa_drift: float = -0.02
    kappa_sd: float = 0.01
    dispersion: float = 300.0      # phi at phi_x = 0
    temp_effect: bool = True
    ili_effect: bool = True
    temp_lag: int = 4
    ili_lag: int = 6
    cells_per_region: int = 3
    temp_scale: float = 1.0        # multiplies the true temperature surface
    ili_scale: float = 1.0

    def __post_init__(self):
        if self.n_ages < 2 or self.n_years < 3 or self.n_regions < 2:
            raise ValueError("synthetic panels need at least 2 ages, 3 years and 2 regions")
        if self.population <= 0 or self.dispersion <= 0:
            raise ValueError("population and dispersion must be positive")


@dataclass(eq=False)
class SynthData:
    panel: MortalityPanel
    covariates: CovariatePanel
    graph: RegionGraph
    theta: ParamSet
    design: DesignSpec | None
    population: AnnualPopulation
    grid: GriddedDaily
    model_data: ModelData = field(repr=False, default=None)


def _graph(regions):
    R = len(regions)
    edges = [(regions[i], regions[i + 1]) for i in range(R - 1)]
    if R >= 3:
        edges.append((regions[0], regions[2]))
    return RegionGraph.from_edges(regions, edges)


def daily_temperature(years, regions, cells_per_region, rng):
    """Seasonal sinusoid plus AR(1) noise on a few grid cells per region."""
    start = iso_week_start(years[0], 1)
    stop = iso_week_start(years[-1] + 1, 1)
    n = (stop - start).days
    dates = np.arange(np.datetime64(start), np.datetime64(stop))
    doy = np.array([d.timetuple().tm_yday for d in dates.astype(dt.date)], dtype=float)
    cells, regs, weights, cols = [], [], [], []
    for ri, r in enumerate(regions):
        shift = rng.normal(0.0, 1.5)
        common = np.zeros(n)
        e = rng.normal(0.0, 2.0, n)
        for i in range(1, n):
            common[i] = 0.7 * common[i - 1] + e[i]
        for c in range(cells_per_region):
            noise = rng.normal(0.0, 0.5, n)
            mean = 12.0 + shift + rng.normal(0, 0.5) + 8.0 * np.sin(2 * np.pi * (doy - 110) / 365.25)
            cols.append(mean + common + noise)
            cells.append(f"{r}_c{c}")
            regs.append(r)
            weights.append(float(rng.uniform(0.5, 2.0)))
    return GriddedDaily(tuple(cells), tuple(regs), np.array(weights), dates,
                        np.column_stack(cols))


def weekly_ili(n_years, n_regions, rng):
    """Winter epidemics as Gaussian bumps with gamma-distributed size, per 100k."""
    T = n_years + 1
    wk = np.arange(T * N_WEEKS, dtype=float)
    # smooth positive baseline around 20: log-AR(1) noise
    z = np.zeros((T * N_WEEKS, n_regions))
    e = rng.normal(0, 0.1, z.shape)
    for t in range(1, z.shape[0]):
        z[t] = 0.8 * z[t - 1] + e[t]
    out = 20.0 * np.exp(z)
    for y in range(T):
        peak_nat = y * N_WEEKS + 4 + rng.normal(0, 2.5)
        size = rng.gamma(3.0, 120.0)
        for r in range(n_regions):
            peak = peak_nat + rng.normal(0, 1.0)
            amp = size * rng.uniform(0.7, 1.3)
            out[:, r] += amp * np.exp(-0.5 * ((wk - peak) / 2.5) ** 2)
    # drop the leading half year so the first epidemic is not truncated
    return out[N_WEEKS // 2:N_WEEKS // 2 + n_years * N_WEEKS].reshape(n_years, N_WEEKS, n_regions)


def temperature_target(xi, lag, ref=12.5):
    """Log-RR surface with a sharp heat effect at lag 0, harvesting at lags 1-2
    and a milder, spread-out cold effect."""
    heat = 0.012 * np.maximum(xi - 20.0, 0.0) ** 2
    cold = 0.03 * np.maximum(ref - xi, 0.0)
    w_heat = np.interp(lag, [0, 1, 2, 3, 4], [1.0, -0.35, -0.2, 0.0, 0.0])
    w_cold = np.interp(lag, [0, 1, 2, 3, 4], [0.1, 0.25, 0.3, 0.2, 0.1])
    return heat * w_heat + cold * w_cold


def ili_target(anom, lag):
    return 4e-4 * anom * np.interp(lag, [0, 1, 2, 3, 4, 5, 6],
                                   [1.0, 0.8, 0.5, 0.3, 0.15, 0.05, 0.0])


def project_surface(spec, target, xi_grid, ref):
    """Least-squares coefficients of ``target(xi, l) - target(ref, l)`` on the tensor basis."""
    lags = np.arange(spec.max_lag + 1)
    B = eval_basis(spec.covariate_basis, np.r_[xi_grid, ref])
    dB = B[:-1] - B[-1]
    C = spec.lag_values(lags)
    rows, rhs = [], []
    for i, xi in enumerate(xi_grid):
        for j, l in enumerate(lags):
            rows.append(np.kron(dB[i], C[j]))
            rhs.append(target(xi, l) - target(ref, l))
    coef, *_ = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)
    return coef


def true_params(cfg, design, rng, T):
    X, R = cfg.n_ages, cfg.n_regions
    W = N_WEEKS
    Q1 = design.temp[0].n_columns if design is not None and cfg.temp_effect else 0
    Q2 = design.ili.n_columns if design is not None and cfg.ili_effect else 0
    th = ParamSet.initial(X, T, R, Q1, Q2, W)
    th.alpha[:] = np.linspace(*cfg.alpha_range, X)[:, None] + rng.normal(0, 0.1, (X, R))
    th.beta[:] = np.linspace(1.0, 0.6, X)
    steps = cfg.kappa_drift + rng.normal(0, cfg.kappa_sd, (T - 1, R))
    th.kappa[1:] = np.cumsum(steps, axis=0)
    th.gamma[:] = np.linspace(1.0, 1.6, X)
    w = np.arange(1, W + 1)
    amp = cfg.lambda_amp * (1 + rng.normal(0, 0.1, R))
    th.lam[:] = (np.cos(2 * np.pi * (w - 1) / W) - 1)[:, None] * amp[None, :]
    th.delta[:] = np.linspace(1.0, 1.8, X)
    th.epsilon[:] = np.linspace(1.0, 1.5, X)
    phx = np.linspace(-0.3, 0.3, X)
    th.phi_x[:] = phx - phx.mean()
    th.phi_x[0] = -th.phi_x[1:].sum()
    th.phi_r[:] = np.log(cfg.dispersion) + rng.normal(0, 0.2, R)
    if Q1:
        for r, spec in enumerate(design.temp):
            lo, hi = spec.covariate_basis.boundary
            th.eta1[r] = cfg.temp_scale * project_surface(
                spec, temperature_target, np.linspace(lo, hi, 60), 12.5)
    if Q2:
        coef = project_surface(design.ili, ili_target, np.linspace(0, 400, 41), 0.0)
        th.eta2[:] = cfg.ili_scale * coef[None, :]
    return th


def generate(cfg=SynthConfig(), seed=0, theta=None):
    """Draw a full synthetic data set; identical seeds give identical output."""
    rng = np.random.default_rng(seed)
    X, T, R = cfg.n_ages, cfg.n_years, cfg.n_regions
    years = tuple(range(cfg.start_year, cfg.start_year + T))
    regions = tuple(f"R{r + 1:02d}" for r in range(R))
    ages = tuple(f"A{x + 1}" for x in range(X))

    grid = daily_temperature(years, regions, cfg.cells_per_region, rng)
    _, tavg = aggregate_temperature(grid, years)
    ili = weekly_ili(T, R, rng)
    covs = CovariatePanel(years, regions, tavg, ili)

    growth = 1 + rng.normal(0.003, 0.002, (X, T + 1, R)).cumsum(axis=1)
    pop = AnnualPopulation(ages, tuple(range(years[0], years[-1] + 2)), regions,
                           cfg.population * growth)
    E = interpolate_exposure(pop, years)

    design = None
    Z1 = Z2 = None
    if cfg.temp_effect or cfg.ili_effect:
        full = default_design(tavg, ili, cfg.temp_lag, cfg.ili_lag)
        design = DesignSpec(full.temp if cfg.temp_effect else None,
                            full.ili if cfg.ili_effect else None,
                            full.ili_thresholds if cfg.ili_effect else None)
        Z1, Z2 = design_matrices(design, tavg, ili)
    if theta is None:
        theta = true_params(cfg, design, rng, T)
    md = ModelData(np.zeros(E.shape), E, Z1, Z2)
    mean = E * np.exp(log_mu(theta, md))
    phi = np.broadcast_to(theta.dispersion[:, None, None, :], mean.shape)
    deaths = rng.negative_binomial(phi, phi / (phi + mean)).astype(float)
    panel = MortalityPanel(PanelIndex(ages, years, regions), deaths, E)
    md = ModelData(deaths, E, Z1, Z2)
    return SynthData(panel, covs, _graph(regions), theta, design, pop, grid, md)


def write_csv_inputs(data, directory):
    """Write the synthetic inputs in the ingestion CSV schemas; returns the path map."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    idx = data.panel.index
    paths = {k: out / f"{k}.csv" for k in
             ("deaths", "population", "temperature_grid", "ili", "adjacency")}

    X, T, W, R = idx.shape
    a, t, w, r = np.meshgrid(np.arange(X), np.arange(T), np.arange(W), np.arange(R),
                             indexing="ij")
    pd.DataFrame({"region": np.array(idx.regions)[r.ravel()],
                  "year": np.array(idx.years)[t.ravel()],
                  "isoweek": w.ravel() + 1,
                  "age_group": np.array(idx.ages)[a.ravel()],
                  "deaths": data.panel.deaths.ravel().astype(int)}).to_csv(paths["deaths"], index=False)

    pop = data.population
    a, y, r = np.meshgrid(np.arange(len(pop.ages)), np.arange(len(pop.years)),
                          np.arange(len(pop.regions)), indexing="ij")
    pd.DataFrame({"region": np.array(pop.regions)[r.ravel()],
                  "year": np.array(pop.years)[y.ravel()],
                  "age_group": np.array(pop.ages)[a.ravel()],
                  "population": pop.counts.ravel()}).to_csv(paths["population"], index=False)

    g = data.grid
    nd, nc = g.values.shape
    di, ci = np.meshgrid(np.arange(nd), np.arange(nc), indexing="ij")
    pd.DataFrame({"cell_id": np.array(g.cell_ids)[ci.ravel()],
                  "region": np.array(g.cell_regions)[ci.ravel()],
                  "weight": g.weights[ci.ravel()],
                  "date": np.datetime_as_string(g.dates[di.ravel()], unit="D"),
                  "tavg_c": g.values.ravel()}).to_csv(paths["temperature_grid"], index=False)

    covs = data.covariates
    t, w, r = np.meshgrid(np.arange(T), np.arange(W), np.arange(R), indexing="ij")
    pd.DataFrame({"region": np.array(covs.regions)[r.ravel()],
                  "year": np.array(covs.years)[t.ravel()],
                  "isoweek": w.ravel() + 1,
                  "ili_rate": covs.ili.ravel()}).to_csv(paths["ili"], index=False)

    pd.DataFrame(data.graph.edges(), columns=["region_a", "region_b"]).to_csv(
        paths["adjacency"], index=False)
    return {k: str(v) for k, v in paths.items()}
