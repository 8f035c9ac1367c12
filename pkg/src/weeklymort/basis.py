"""Spline bases for the covariate and lag dimensions of a DLNM.

Kinds:

* ``cubic-bspline``: cubic B-splines on ``[lower]*4 + interior + [upper]*4``.
  The full basis has ``len(interior) + 4`` columns and sums to one inside
  the boundary; with ``intercept=False`` the first column is dropped.
* ``natural-cubic``: truncated-power natural cubic spline with knots
  ``[lower] + interior + [upper]``. With intercept the first column is the
  constant 1 and the basis has one column per knot.
* ``linear``: the value itself (plus a constant column with intercept).
* ``identity``: the value itself.

Outside the boundary knots both spline kinds continue linearly: natural
splines by construction, B-splines by a first-order extension from the
boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

log = logging.getLogger(__name__)

KINDS = ("cubic-bspline", "natural-cubic", "linear", "identity")


@dataclass(frozen=True)
class BasisSpec:
    kind: str
    interior_knots: tuple = ()
    boundary: tuple = (0.0, 1.0)
    intercept: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}; choose from {KINDS}")
        knots = tuple(float(k) for k in self.interior_knots)
        lo, hi = (float(b) for b in self.boundary)
        object.__setattr__(self, "interior_knots", knots)
        object.__setattr__(self, "boundary", (lo, hi))
        if self.kind in ("cubic-bspline", "natural-cubic"):
            if not lo < hi:
                raise ValueError(f"degenerate boundary ({lo}, {hi})")
            if any(b <= a for a, b in zip(knots, knots[1:])):
                raise ValueError(f"interior knots must be strictly increasing: {knots}")
            if knots and not (lo < knots[0] and knots[-1] < hi):
                raise ValueError(f"interior knots {knots} must lie inside ({lo}, {hi})")

    @property
    def n_columns(self):
        k = len(self.interior_knots)
        if self.kind == "cubic-bspline":
            return k + 4 - (0 if self.intercept else 1)
        if self.kind == "natural-cubic":
            return k + 2 - (0 if self.intercept else 1)
        if self.kind == "linear":
            return 2 if self.intercept else 1
        return 1

    def to_dict(self):
        return {"kind": self.kind, "interior_knots": list(self.interior_knots),
                "boundary": list(self.boundary), "intercept": self.intercept}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], tuple(d.get("interior_knots", ())),
                   tuple(d.get("boundary", (0.0, 1.0))), bool(d.get("intercept", False)))


def _bspline_full(spec, x):
    lo, hi = spec.boundary
    t = np.r_[[lo] * 4, spec.interior_knots, [hi] * 4]
    # extrapolate=True so that x == hi takes the left limit of the last piece
    spl = BSpline(t, np.eye(len(t) - 4), 3, extrapolate=True)
    out = spl(np.clip(x, lo, hi))
    below, above = x < lo, x > hi
    if below.any() or above.any():
        d = spl.derivative()
        for mask, edge in ((below, lo), (above, hi)):
            if mask.any():
                e = np.array([edge])
                out[mask] = spl(e)[0] + np.outer(x[mask] - edge, d(e)[0])
    return out


def _natural_full(spec, x):
    knots = np.r_[spec.boundary[0], spec.interior_knots, spec.boundary[1]]
    K = len(knots)
    if K < 2:
        raise ValueError("natural cubic spline needs at least two knots")
    cols = [np.ones_like(x), x.copy()]
    last = knots[-1]

    def d(k):
        return (np.maximum(x - knots[k], 0.0) ** 3
                - np.maximum(x - last, 0.0) ** 3) / (last - knots[k])

    d_last = d(K - 2)
    for k in range(K - 2):
        cols.append(d(k) - d_last)
    return np.column_stack(cols)


def eval_basis(spec, points):
    """Evaluate a basis at ``points``; returns an array of shape (n, v)."""
    x = np.asarray(points, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("basis points must be finite")
    if spec.kind == "cubic-bspline":
        full = _bspline_full(spec, x)
    elif spec.kind == "natural-cubic":
        full = _natural_full(spec, x)
    elif spec.kind == "linear":
        full = np.column_stack([np.ones_like(x), x])
    else:
        return x[:, None].copy()
    return full if spec.intercept else full[:, 1:]


def knots_from_percentiles(values, probs=(0.10, 0.90)):
    """Type-7 percentile knots with boundary at the sample range.

    Returns ``(interior_knots, (min, max))``.
    """
    v = np.asarray(values, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0 or v.min() == v.max():
        raise ValueError("cannot place knots on constant or empty data")
    if np.unique(v).size < 10:
        log.warning("placing percentile knots on fewer than 10 distinct values")
    knots = np.quantile(v, probs, method="linear")
    return tuple(float(k) for k in knots), (float(v.min()), float(v.max()))
