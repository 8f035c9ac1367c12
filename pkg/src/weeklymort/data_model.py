"""Index sets and panel containers shared by the whole package.

All tensors are dense and indexed ``[age, year, week, region]`` (mortality)
or ``[year, week, region]`` (covariates). Weeks always run 1..52; ISO week 53
is folded into week 52 during ingestion.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_WEEKS = 52


@dataclass(frozen=True)
class PanelIndex:
    ages: tuple
    years: tuple
    regions: tuple
    weeks: tuple = tuple(range(1, N_WEEKS + 1))

    def __post_init__(self):
        object.__setattr__(self, "ages", tuple(self.ages))
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "regions", tuple(str(r) for r in self.regions))
        object.__setattr__(self, "weeks", tuple(int(w) for w in self.weeks))
        if not self.ages:
            raise ValueError("at least one age group is required")
        if len(set(self.ages)) != len(self.ages):
            raise ValueError("age group labels must be unique")
        if not self.years:
            raise ValueError("at least one year is required")
        if list(self.years) != list(range(self.years[0], self.years[0] + len(self.years))):
            raise ValueError(f"years must be contiguous, got {self.years}")
        if self.weeks != tuple(range(1, N_WEEKS + 1)):
            raise ValueError("weeks must be exactly 1..52")
        if len(set(self.regions)) != len(self.regions):
            raise ValueError("region codes must be unique")

    @property
    def shape(self):
        return (len(self.ages), len(self.years), N_WEEKS, len(self.regions))

    @property
    def n_times(self):
        return len(self.years) * N_WEEKS

    def time_keys(self):
        """(year, week) pairs in flattened time order."""
        return [(t, w) for t in self.years for w in self.weeks]

    def subset_years(self, years):
        return PanelIndex(self.ages, tuple(years), self.regions)

    def region_pos(self, code):
        return self.regions.index(str(code))

    def age_pos(self, label):
        return self.ages.index(label)


@dataclass(frozen=True, eq=False)
class MortalityPanel:
    index: PanelIndex
    deaths: np.ndarray
    exposures: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.deaths, dtype=float)
        e = np.asarray(self.exposures, dtype=float)
        d.setflags(write=False)
        e.setflags(write=False)
        object.__setattr__(self, "deaths", d)
        object.__setattr__(self, "exposures", e)
        if d.shape != self.index.shape or e.shape != self.index.shape:
            raise ValueError(
                f"tensor shapes {d.shape}/{e.shape} do not match index {self.index.shape}")

    @property
    def rates(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.deaths / self.exposures

    def subset_years(self, years):
        pos = [self.index.years.index(y) for y in years]
        return MortalityPanel(self.index.subset_years(years),
                              self.deaths[:, pos], self.exposures[:, pos])

    def national(self, label="national"):
        """Collapse regions by summing deaths and exposures."""
        idx = PanelIndex(self.index.ages, self.index.years, (label,))
        return MortalityPanel(idx, self.deaths.sum(axis=3, keepdims=True),
                              self.exposures.sum(axis=3, keepdims=True))


@dataclass(frozen=True, eq=False)
class CovariatePanel:
    years: tuple
    regions: tuple
    tavg: np.ndarray
    ili: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        object.__setattr__(self, "regions", tuple(str(r) for r in self.regions))
        shape = (len(self.years), N_WEEKS, len(self.regions))
        for name in ("tavg", "ili"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != shape:
                raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def subset_years(self, years):
        pos = [self.years.index(y) for y in years]
        return CovariatePanel(tuple(years), self.regions, self.tavg[pos], self.ili[pos])

    def flat(self, name):
        """(T*52, R) view of a covariate in time order."""
        a = getattr(self, name)
        return a.reshape(-1, a.shape[-1])


@dataclass(frozen=True, eq=False)
class RegionGraph:
    regions: tuple
    adjacency: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(str(r) for r in self.regions))
        a = np.asarray(self.adjacency, dtype=bool)
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @classmethod
    def from_edges(cls, regions, edges):
        regions = tuple(str(r) for r in regions)
        pos = {r: i for i, r in enumerate(regions)}
        adj = np.zeros((len(regions), len(regions)), dtype=bool)
        for a, b in edges:
            i, j = pos[str(a)], pos[str(b)]
            adj[i, j] = adj[j, i] = True
        return cls(regions, adj)

    def edges(self):
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return [(self.regions[a], self.regions[b]) for a, b in zip(i, j)]

    def permuted(self, order):
        pos = [self.regions.index(r) for r in order]
        return RegionGraph(tuple(order), self.adjacency[np.ix_(pos, pos)])


@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    where: tuple = ()


# issues that are reported but do not invalidate a panel
WARNING_CODES = frozenset({"deaths_imputed_zero"})


@dataclass
class ValidationReport:
    issues: list = field(default_factory=list)

    def errors(self):
        return [i for i in self.issues if i.code not in WARNING_CODES]

    def add(self, code, message, where=()):
        self.issues.append(Issue(code, message, tuple(where)))

    @property
    def ok(self):
        return not self.issues

    def __bool__(self):
        return bool(self.issues)

    def __len__(self):
        return len(self.issues)

    def __iter__(self):
        return iter(self.issues)

    def codes(self):
        return [i.code for i in self.issues]

    def summary(self, limit=20):
        lines = [f"{i.code}: {i.message}" for i in self.issues[:limit]]
        if len(self.issues) > limit:
            lines.append(f"... and {len(self.issues) - limit} more")
        return "\n".join(lines)


def _cells(mask, labels):
    """Coordinates of True entries translated to index labels."""
    out = []
    for pos in zip(*np.nonzero(mask)):
        out.append(tuple(lab[p] for lab, p in zip(labels, pos)))
    return out


def validate_panel(panel, covs=None, graph=None):
    """Check every container invariant and list the violations.

    Nothing is raised; an empty report means all invariants hold.
    """
    rep = ValidationReport()
    idx = panel.index
    labels = (idx.ages, idx.years, idx.weeks, idx.regions)

    d, e = panel.deaths, panel.exposures
    for code, mask, msg in (
        ("deaths_nonfinite", ~np.isfinite(d), "death count is not finite"),
        ("deaths_negative", np.isfinite(d) & (d < 0), "death count is negative"),
        ("deaths_noninteger", np.isfinite(d) & (d != np.round(d)), "death count is not an integer"),
        ("exposure_nonpositive", ~(e > 0), "exposure must be strictly positive"),
    ):
        for cell in _cells(mask, labels):
            rep.add(code, f"{msg} at (age, year, week, region) = {cell}", cell)

    if covs is not None:
        if covs.years != idx.years or covs.regions != idx.regions:
            rep.add("covariate_grid", "covariate (year, region) grid differs from the mortality panel")
        else:
            clab = (idx.years, idx.weeks, idx.regions)
            for cell in _cells(~np.isfinite(covs.tavg), clab):
                rep.add("tavg_nonfinite", f"temperature missing at {cell}", cell)
            for cell in _cells(~(covs.ili >= 0), clab):
                rep.add("ili_negative", f"ILI negative or missing at {cell}", cell)

    if graph is not None:
        a = graph.adjacency
        if graph.regions != idx.regions:
            missing = sorted(set(idx.regions) - set(graph.regions))
            rep.add("graph_regions",
                    f"graph regions {graph.regions} do not match panel regions (missing {missing})")
        if a.shape != (len(graph.regions),) * 2:
            rep.add("graph_shape", f"adjacency shape {a.shape} does not match region count")
        else:
            for i, j in zip(*np.nonzero(a != a.T)):
                if i < j:
                    pair = (graph.regions[i], graph.regions[j])
                    rep.add("graph_asymmetric", f"adjacency not symmetric for pair {pair}", pair)
            for i in np.nonzero(np.diag(a))[0]:
                rep.add("graph_self_loop", f"self-loop at region {graph.regions[i]}",
                        (graph.regions[i],))
    return rep


def dispersion_index(panel):
    """Variance-to-mean ratio of weekly deaths per (age, region).

    Returns ``(index, undefined)`` where ``undefined`` flags strata whose
    mean count is zero; their index entry is NaN.
    """
    d = panel.deaths
    x, t, w, r = d.shape
    if t * w < 2:
        raise ValueError("need at least two time points per stratum")
    flat = d.transpose(0, 3, 1, 2).reshape(x, r, t * w)
    mean = flat.mean(axis=-1)
    var = flat.var(axis=-1, ddof=1)
    undefined = mean == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(undefined, np.nan, var / np.where(undefined, 1.0, mean))
    return out, undefined
