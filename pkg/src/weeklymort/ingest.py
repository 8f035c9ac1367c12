"""Build model-ready panels from tabular inputs.

CSV schemas (UTF-8, header row, comma separated)::

    deaths.csv            region,year,isoweek,age_group,deaths
    population.csv        region,year,age_group,population      (January 1 counts)
    temperature_grid.csv  cell_id,region,weight,date,tavg_c     (daily, YYYY-MM-DD)
    ili.csv               region,year,isoweek,ili_rate
    adjacency.csv         region_a,region_b                     (one undirected edge per row)

Optionally, weekly covariates that are already aggregated can be given as::

    covariates.csv        region,year,isoweek,tavg_c,ili_rate

ISO week 53 is folded into week 52: deaths and exposures are summed,
covariates are averaged.
"""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .data_model import (N_WEEKS, CovariatePanel, MortalityPanel, PanelIndex, RegionGraph,
                         ValidationReport, validate_panel)

log = logging.getLogger(__name__)

WEEKS_PER_YEAR = 52.18


class SchemaError(ValueError):
    """Input file does not match its schema."""

    def __init__(self, path, message, lines=()):
        self.path = str(path)
        self.lines = list(lines)
        where = f" (lines {', '.join(map(str, self.lines[:10]))})" if self.lines else ""
        super().__init__(f"{self.path}: {message}{where}")


class DuplicateKeyError(SchemaError):
    pass


@dataclass(frozen=True, eq=False)
class AnnualPopulation:
    """January-1 population counts ``counts[age, year, region]``."""
    ages: tuple
    years: tuple
    regions: tuple
    counts: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "regions", tuple(str(r) for r in self.regions))
        c = np.asarray(self.counts, dtype=float)
        if c.shape != (len(self.ages), len(self.years), len(self.regions)):
            raise ValueError("population counts do not match (ages, years, regions)")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ValueError("population counts must be finite and nonnegative")
        object.__setattr__(self, "counts", c)

    def at(self, year):
        return self.counts[:, self.years.index(year), :]


@dataclass(frozen=True, eq=False)
class GriddedDaily:
    """Daily gridded temperature with a population weight per cell."""
    cell_ids: tuple
    cell_regions: tuple
    weights: np.ndarray
    dates: np.ndarray       # datetime64[D], one per row of ``values``
    values: np.ndarray      # (n_days, n_cells) in degrees C


# ---------------------------------------------------------------------------
# calendar helpers

def n_iso_weeks(year):
    return dt.date(year, 12, 28).isocalendar()[1]


def iso_week_start(year, week):
    return dt.date.fromisocalendar(year, week, 1)


def _interp_population(pop, year, start):
    """Linearly interpolated population at ``start`` using the ISO year's segment.

    The segment [Jan 1 of ``year``, Jan 1 of ``year``+1] is used; when the
    count for ``year``+1 is unavailable, the previous segment is extended.
    """
    seg = year
    if seg + 1 not in pop.years:
        seg = year - 1
    if seg not in pop.years or seg + 1 not in pop.years:
        raise ValueError(f"population does not cover years {year} and {year + 1}")
    jan1 = dt.date(seg, 1, 1)
    span = (dt.date(seg + 1, 1, 1) - jan1).days
    frac = (start - jan1).days / span
    p0, p1 = pop.at(seg), pop.at(seg + 1)
    return p0 + frac * (p1 - p0)


def interpolate_exposure(pop, years, fold_week53=True):
    """Weekly exposures in person-years, shape (age, year, 52, region).

    Population is interpolated linearly to each ISO week start date and the
    exposure of a week is the midpoint of its start and the next week's
    start, divided by 52.18.
    """
    years = [int(y) for y in years]
    missing = [y for y in years + [years[-1] + 1] if y not in pop.years]
    if missing:
        raise ValueError(f"population counts missing for years {missing}")
    nx, nr = len(pop.ages), len(pop.regions)
    out = np.zeros((nx, len(years), N_WEEKS, nr))
    for ti, t in enumerate(years):
        nw = n_iso_weeks(t)
        starts = [(t, w) for w in range(1, nw + 1)] + [(t + 1, 1)]
        ptil = [_interp_population(pop, y, iso_week_start(y, w)) for y, w in starts]
        weekly = [(ptil[k] + ptil[k + 1]) / (2.0 * WEEKS_PER_YEAR) for k in range(nw)]
        for k in range(min(nw, N_WEEKS)):
            out[:, ti, k, :] = weekly[k]
        if nw == 53:
            if fold_week53:
                out[:, ti, N_WEEKS - 1, :] += weekly[52]
    return out


# ---------------------------------------------------------------------------
# covariates

def aggregate_temperature(grid, years):
    """Population-weighted regional daily means, then plain ISO-week means.

    Returns ``(regions, tavg)`` with ``tavg`` of shape (year, 52, region).
    """
    years = [int(y) for y in years]
    regions = tuple(dict.fromkeys(grid.cell_regions))
    w = np.asarray(grid.weights, dtype=float)
    if np.any(w < 0):
        raise ValueError("population weights must be nonnegative")
    cell_reg = np.asarray(grid.cell_regions)
    daily = np.empty((len(grid.dates), len(regions)))
    for ri, r in enumerate(regions):
        cols = np.nonzero(cell_reg == r)[0]
        tot = w[cols].sum()
        if tot <= 0:
            raise ValueError(f"region {r} has no cell with positive weight")
        daily[:, ri] = grid.values[:, cols] @ (w[cols] / tot)

    dates = pd.to_datetime(np.asarray(grid.dates))
    iso = dates.isocalendar()
    frame = pd.DataFrame(daily, columns=list(regions))
    frame["year"] = iso["year"].to_numpy()
    frame["week"] = np.minimum(iso["week"].to_numpy(), N_WEEKS)
    frame["raw_week"] = iso["week"].to_numpy()
    # mean per raw ISO week, then fold 53 into 52 by averaging the two weekly means
    weekly = frame.groupby(["year", "raw_week"])
    counts = weekly.size()
    means = weekly[list(regions)].mean()
    out = np.full((len(years), N_WEEKS, len(regions)), np.nan)
    for ti, t in enumerate(years):
        for wk in range(1, n_iso_weeks(t) + 1):
            if counts.get((t, wk), 0) != 7:
                raise ValueError(f"temperature grid is missing days in ISO week {t}-W{wk:02d}")
        row = means.loc[t]
        vals = row.loc[list(range(1, N_WEEKS + 1))].to_numpy()
        if n_iso_weeks(t) == 53:
            vals[-1] = 0.5 * (vals[-1] + row.loc[53].to_numpy())
        out[ti] = vals
    return regions, out


def ili_thresholds(ili, years, calibration_years=None, q=0.9):
    """Region- and week-specific empirical quantiles (type 7) of weekly ILI."""
    years = list(years)
    cal = years if calibration_years is None else list(calibration_years)
    pos = [years.index(y) for y in cal]
    if len(pos) < 10:
        log.warning("ILI quantile based on %d years; at least 10 recommended", len(pos))
    return np.quantile(np.asarray(ili)[pos], q, axis=0, method="linear")


def ili_anomaly(ili, years=None, calibration_years=None, q=0.9, thresholds=None):
    """Exceedance of weekly ILI over its week/region 90th percentile, floored at 0."""
    ili = np.asarray(ili, dtype=float)
    if thresholds is None:
        years = list(range(ili.shape[0])) if years is None else list(years)
        thresholds = ili_thresholds(ili, years, calibration_years, q)
    return np.maximum(ili - thresholds[None], 0.0)


# ---------------------------------------------------------------------------
# CSV loading

def _read(path, columns, dtypes=None):
    path = Path(path)
    if not path.exists():
        raise SchemaError(path, "file does not exist")
    try:
        df = pd.read_csv(path, dtype={c: str for c in ("region", "region_a", "region_b",
                                                          "age_group", "cell_id")})
    except Exception as exc:  # pragma: no cover - pandas parser messages vary
        raise SchemaError(path, f"unreadable CSV: {exc}") from exc
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise SchemaError(path, f"missing columns {missing}; expected {columns}")
    df = df[columns].copy()
    for col, kind in (dtypes or {}).items():
        conv = pd.to_numeric(df[col], errors="coerce")
        bad = conv.isna() & df[col].notna() | df[col].isna()
        if bad.any():
            raise SchemaError(path, f"column {col!r} has missing or non-numeric values",
                              (df.index[bad] + 2).tolist())
        if kind == "int":
            if (conv != np.round(conv)).any():
                raise SchemaError(path, f"column {col!r} must be integer",
                                  (df.index[conv != np.round(conv)] + 2).tolist())
            conv = conv.astype(int)
        df[col] = conv
    return df


def _check_dupes(df, keys, path):
    dup = df.duplicated(keys, keep=False)
    if dup.any():
        raise DuplicateKeyError(path, f"duplicate rows for key {keys}", (df.index[dup] + 2).tolist())


def _check_weeks(df, path):
    bad = (df["isoweek"] < 1) | (df["isoweek"] > 53)
    if bad.any():
        raise SchemaError(path, "isoweek must lie in 1..53", (df.index[bad] + 2).tolist())
    w53 = df["isoweek"] == 53
    if w53.any():
        bad = [i for i, y in zip(df.index[w53], df.loc[w53, "year"]) if n_iso_weeks(int(y)) != 53]
        if bad:
            raise SchemaError(path, "week 53 given for a year with 52 ISO weeks",
                              [i + 2 for i in bad])


def read_population(path, ages=None, regions=None):
    df = _read(path, ["region", "year", "age_group", "population"],
               {"year": "int", "population": "float"})
    _check_dupes(df, ["region", "year", "age_group"], path)
    ages = tuple(ages) if ages else tuple(dict.fromkeys(df["age_group"]))
    regions = tuple(regions) if regions else tuple(sorted(set(df["region"])))
    years = tuple(range(int(df["year"].min()), int(df["year"].max()) + 1))
    cube = (df.set_index(["age_group", "year", "region"])["population"]
              .reindex(pd.MultiIndex.from_product([ages, years, regions])))
    if cube.isna().any():
        missing = cube.index[cube.isna()][:5].tolist()
        raise SchemaError(path, f"population missing for {missing} ...")
    counts = cube.to_numpy().reshape(len(ages), len(years), len(regions))
    return AnnualPopulation(ages, years, regions, counts)


def read_deaths(path, index, report=None):
    df = _read(path, ["region", "year", "isoweek", "age_group", "deaths"],
               {"year": "int", "isoweek": "int", "deaths": "float"})
    _check_dupes(df, ["region", "year", "isoweek", "age_group"], path)
    _check_weeks(df, path)
    if (df["deaths"] < 0).any():
        raise SchemaError(path, "negative death counts", (df.index[df["deaths"] < 0] + 2).tolist())
    df = df[df["year"].isin(index.years) & df["region"].isin(index.regions)
            & df["age_group"].isin(index.ages)]
    df = df.assign(week=np.minimum(df["isoweek"], N_WEEKS))
    agg = df.groupby(["age_group", "year", "week", "region"])["deaths"].sum()
    full = pd.MultiIndex.from_product([index.ages, index.years, range(1, N_WEEKS + 1),
                                       index.regions])
    cube = agg.reindex(full)
    gaps = cube.isna()
    if gaps.any() and report is not None:
        for key in cube.index[gaps]:
            report.add("deaths_imputed_zero", f"no death row for {key}; imputed 0", key)
    return cube.fillna(0.0).to_numpy().reshape(index.shape)


def read_weekly(path, column, years, regions):
    df = _read(path, ["region", "year", "isoweek", column],
               {"year": "int", "isoweek": "int", column: "float"})
    _check_dupes(df, ["region", "year", "isoweek"], path)
    _check_weeks(df, path)
    df = df[df["year"].isin(years) & df["region"].isin(regions)]
    df = df.assign(week=np.minimum(df["isoweek"], N_WEEKS))
    agg = df.groupby(["year", "week", "region"])[column].mean()
    full = pd.MultiIndex.from_product([list(years), range(1, N_WEEKS + 1), list(regions)])
    cube = agg.reindex(full)
    if cube.isna().any():
        raise SchemaError(path, f"{column} missing for {cube.index[cube.isna()][:5].tolist()} ...")
    return cube.to_numpy().reshape(len(years), N_WEEKS, len(regions))


def read_temperature_grid(path):
    df = _read(path, ["cell_id", "region", "weight", "date", "tavg_c"],
               {"weight": "float", "tavg_c": "float"})
    cells = df.drop_duplicates("cell_id")[["cell_id", "region", "weight"]]
    check = df.groupby("cell_id")[["region", "weight"]].nunique()
    if (check > 1).any(axis=None):
        raise SchemaError(path, "cell region/weight must be constant per cell")
    _check_dupes(df, ["cell_id", "date"], path)
    try:
        df["date"] = pd.to_datetime(df["date"], format="%Y-%m-%d")
    except ValueError as exc:
        raise SchemaError(path, f"bad date: {exc}") from exc
    wide = df.pivot(index="date", columns="cell_id", values="tavg_c")
    wide = wide[cells["cell_id"].tolist()]
    if wide.isna().any(axis=None):
        raise SchemaError(path, "some cells lack values on some dates")
    return GriddedDaily(tuple(cells["cell_id"]), tuple(cells["region"]),
                        cells["weight"].to_numpy(float),
                        wide.index.to_numpy().astype("datetime64[D]"), wide.to_numpy(float))


def read_adjacency(path, regions):
    df = _read(path, ["region_a", "region_b"])
    unknown = sorted((set(df["region_a"]) | set(df["region_b"])) - set(regions))
    if unknown:
        raise SchemaError(path, f"unknown regions {unknown}")
    return RegionGraph.from_edges(regions, zip(df["region_a"], df["region_b"]))


def read_covariates(path, years, regions):
    """Pre-aggregated weekly covariates (region,year,isoweek,tavg_c,ili_rate)."""
    tavg = read_weekly(path, "tavg_c", years, regions)
    ili = read_weekly(path, "ili_rate", years, regions)
    return CovariatePanel(tuple(years), tuple(regions), tavg, ili)


def load_csv_inputs(paths, years=None, ages=None, regions=None):
    """Load every input file and return validated in-memory objects.

    ``paths`` maps ``deaths``, ``population``, ``ili``, ``adjacency`` and
    either ``temperature_grid`` or ``covariates`` to file paths.

    Returns ``(panel, covariates, graph, population, report)``.
    """
    report = ValidationReport()
    pop = read_population(paths["population"], ages, regions)
    if years is None:
        dyears = _read(paths["deaths"], ["year"], {"year": "int"})["year"]
        years = range(int(dyears.min()), int(dyears.max()) + 1)
    years = tuple(int(y) for y in years)
    index = PanelIndex(pop.ages, years, pop.regions)
    deaths = read_deaths(paths["deaths"], index, report)
    exposures = interpolate_exposure(pop, years)
    panel = MortalityPanel(index, deaths, exposures)

    if paths.get("covariates"):
        covs = read_covariates(paths["covariates"], years, index.regions)
        tavg, ili = covs.tavg, covs.ili
    else:
        grid = read_temperature_grid(paths["temperature_grid"])
        reg, tavg = aggregate_temperature(grid, years)
        missing = sorted(set(index.regions) - set(reg))
        if missing:
            raise SchemaError(paths["temperature_grid"], f"no cells for regions {missing}")
        tavg = tavg[:, :, [reg.index(r) for r in index.regions]]
        ili = read_weekly(paths["ili"], "ili_rate", years, index.regions)
    covs = CovariatePanel(years, index.regions, tavg, ili)
    graph = read_adjacency(paths["adjacency"], index.regions)
    for issue in validate_panel(panel, covs, graph):
        report.issues.append(issue)
    return panel, covs, graph, pop, report
