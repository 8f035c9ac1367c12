"""Blockwise Newton calibration, smoothing selection and Fisher covariance."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .likelihood import (
    BASELINE_BLOCKS,
    DISPERSION_BLOCKS,
    Layout,
    ModelData,
    NumericalError,
    ParamSet,
    PenaltyConfig,
    block_derivatives,
    cell_terms,
    full_gradient,
    full_hessian,
    layout_for,
    nb_loglik,
    penalized_loglik,
    penalty_matrix,
)

log = logging.getLogger(__name__)

DEFAULT_GRID = 10.0 ** np.arange(0.0, 12.01, 0.5)


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    tol_ll: float = 1e-6
    grad_tol: float = 1e-4
    max_iter: int = 500
    max_halvings: int = 30
    refine: bool = True   # joint blockwise pass over all blocks after the two stages
    accelerate: bool = True  # damped Newton step on all stage blocks after each cycle
    scale_limit: float = 1e6  # bound on |delta| and |epsilon|
    phi_max: float = 1e8      # bound on every cell dispersion (Poisson limit beyond)


@dataclass(eq=False)
class StageInfo:
    iterations: int
    converged: bool
    trace: list
    grad_norm: float


@dataclass(eq=False)
class FitResult:
    theta: ParamSet
    covariance: np.ndarray
    loglik_pen: float
    loglik_unpen: float
    edf: float
    aic: float
    psi1: float
    psi2: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    week_effect: bool = True
    meta: dict = field(default_factory=dict)

    def layout(self):
        X, R = self.theta.alpha.shape
        dims = dict(X=X, T=self.theta.kappa.shape[0], W=self.theta.lam.shape[0], R=R,
                    Q1=self.theta.eta1.shape[1], Q2=self.theta.eta2.shape[1])
        blocks = [b for b in BASELINE_BLOCKS if self.week_effect or b not in ("gamma", "lam")]
        if dims["Q1"]:
            blocks += ["delta", "eta1"]
        if dims["Q2"]:
            blocks += ["epsilon", "eta2"]
        return Layout(dims, blocks)

    @property
    def n_free(self):
        return self.covariance.shape[0]

    def full_covariance(self):
        """Covariance over full coordinates (constrained entries get zero rows)."""
        T = self.layout().transform()
        return T @ self.covariance @ T.T

    def standard_errors(self):
        """Per-block standard-error arrays shaped like the parameters."""
        lay = self.layout()
        sd = np.sqrt(np.clip(np.diag(self.full_covariance()), 0.0, None))
        out = {}
        for b in lay.blocks:
            out[b] = sd[lay.full_slices[b]].reshape(lay.maps[b].shape)
        return out

    def to_dict(self):
        return {
            "params": self.theta.to_dict(),
            "standard_errors": {k: v.tolist() for k, v in self.standard_errors().items()},
            "loglik_pen": self.loglik_pen, "loglik_unpen": self.loglik_unpen,
            "edf": self.edf, "aic": self.aic, "psi1": self.psi1, "psi2": self.psi2,
            "iterations": self.iterations, "converged": self.converged,
            "trace": [float(v) for v in self.trace], "week_effect": self.week_effect,
            "n_free": int(self.n_free), "meta": self.meta,
        }

    def save(self, path, cov_path=None):
        """Write the JSON fit report and the covariance matrix (.npy)."""
        path = str(path)
        cov_path = cov_path or (path.rsplit(".", 1)[0] + "_cov.npy")
        d = self.to_dict()
        d["covariance_file"] = str(cov_path).rsplit("/", 1)[-1]
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1)
        np.save(cov_path, self.covariance)
        return path, cov_path

    @classmethod
    def load(cls, path, cov_path=None):
        path = str(path)
        with open(path) as fh:
            d = json.load(fh)
        if cov_path is None:
            base = path.rsplit("/", 1)[0] + "/" if "/" in path else ""
            cov_path = base + d.get("covariance_file", "")
        return cls(theta=ParamSet.from_dict(d["params"]), covariance=np.load(cov_path),
                   loglik_pen=d["loglik_pen"], loglik_unpen=d["loglik_unpen"], edf=d["edf"],
                   aic=d["aic"], psi1=d["psi1"], psi2=d["psi2"], iterations=d["iterations"],
                   converged=d["converged"], trace=d["trace"], week_effect=d["week_effect"],
                   meta=d.get("meta", {}))


# ---------------------------------------------------------------------------
# Newton updates

def _solve_ascent(H, g):
    """Ascent direction ``(-H)^-1 g``.

    Indefinite Hessians are first Jacobi-scaled and then shifted (Levenberg)
    so that the smallest scaled eigenvalue is at least 1e-3.
    """
    A = -0.5 * (H + H.T)
    try:
        c = np.linalg.cholesky(A)
        return np.linalg.solve(c.T, np.linalg.solve(c, g))
    except np.linalg.LinAlgError:
        pass
    d = np.sqrt(np.maximum(np.abs(np.diag(A)), 1e-12))
    As = A / np.outer(d, d)
    vals, vecs = np.linalg.eigh(As)
    if not np.all(np.isfinite(vals)):
        raise NumericalError("non-finite Hessian")
    tau = max(0.0, -vals[0]) + 1e-3
    return (vecs @ ((vecs.T @ (g / d)) / (vals + tau))) / d


def newton_block_update(theta, data, block, pen=None, layout=None, dlnm=True,
                        max_halvings=30, terms=None, feasible=None):
    """One damped Newton step on a single block.

    Returns ``(theta, loglik)``. The step is halved until the penalized
    log-likelihood does not decrease and ``feasible(candidate)`` holds; if
    no halving succeeds the block is left unchanged.
    """
    m = (layout.maps[block] if layout is not None else
         Layout(data.dims, [block]).maps[block])
    if m.n_free == 0:
        return theta, penalized_loglik(theta, data, pen, dlnm)
    ll0 = penalized_loglik(theta, data, pen, dlnm)
    g_full, H_full = block_derivatives(theta, data, block, terms, pen, dlnm)
    g = m.M.T @ g_full
    if not np.any(g):
        return theta, ll0
    H = m.M.T @ H_full @ m.M
    step = _solve_ascent(H, g)
    u0 = np.ravel(getattr(theta, block))[m.free_idx]
    finite_seen = False
    for k in range(max_halvings + 1):
        u = u0 + step * 0.5**k
        cand = theta.with_block(block, m.offset + m.M @ u)
        if feasible is not None and not feasible(cand):
            finite_seen = True
            continue
        try:
            ll = penalized_loglik(cand, data, pen, dlnm)
        except (NumericalError, FloatingPointError):
            continue
        finite_seen = True
        if ll >= ll0:
            return cand, ll
    if not finite_seen:
        raise NumericalError(f"non-finite log-likelihood in every step of block {block!r}")
    return theta, ll0


def _grad_norm(theta, data, layout, pen, dlnm):
    """Largest absolute gradient entry, raw and divided by sqrt(|H_ii|)."""
    disp = any(b in layout.blocks for b in DISPERSION_BLOCKS)
    terms = cell_terms(theta, data, dispersion=disp, dlnm=dlnm)
    raw = scaled = 0.0
    for b in layout.blocks:
        M = layout.maps[b].M
        if not M.shape[1]:
            continue
        g, H = block_derivatives(theta, data, b, terms, pen, dlnm)
        g = M.T @ g
        h = np.abs(np.einsum("ij,ik,kj->j", M, H, M))
        raw = max(raw, float(np.max(np.abs(g))))
        scaled = max(scaled, float(np.max(np.abs(g) / np.sqrt(np.maximum(h, 1e-300)))))
    return raw, scaled


JOINT_SHIFTS = (0.0,) + tuple(10.0 ** np.arange(-8, 1))


def joint_newton_update(theta, data, layout, pen=None, dlnm=True, max_halvings=30,
                        feasible=None):
    """Levenberg-damped Newton step on every block of ``layout`` at once.

    Near the optimum the joint Hessian can be very ill conditioned (the
    age scalings and the lag-response coefficients trade off almost
    freely), so a plain line search along the Newton direction stalls.
    Instead the Jacobi-scaled system is solved for a ladder of shifts and
    the best candidate is kept; halvings are the fallback.
    """
    ll0 = penalized_loglik(theta, data, pen, dlnm)
    g = full_gradient(theta, data, layout, pen, dlnm)
    H = full_hessian(theta, data, layout, pen, penalized=True, dlnm=dlnm)
    A = -0.5 * (H + H.T)
    d = np.sqrt(np.maximum(np.abs(np.diag(A)), 1e-12))
    vals, vecs = np.linalg.eigh(A / np.outer(d, d))
    if not np.all(np.isfinite(vals)):
        return theta, ll0
    gs = vecs.T @ (g / d)
    floor = max(0.0, -vals[0]) + 1e-12
    u0 = layout.pack(theta)

    def trial(step):
        cand = layout.unpack(u0 + step, theta)
        if feasible is not None and not feasible(cand):
            return cand, -np.inf
        try:
            return cand, penalized_loglik(cand, data, pen, dlnm)
        except (NumericalError, FloatingPointError):
            return cand, -np.inf

    best, best_ll = theta, ll0
    for tau in JOINT_SHIFTS:
        step = (vecs @ (gs / (vals + floor + tau))) / d
        cand, ll = trial(step)
        if ll > best_ll:
            best, best_ll = cand, ll
    if best is not theta:
        return best, best_ll
    step = (vecs @ (gs / (vals + floor))) / d
    for k in range(1, max_halvings + 1):
        cand, ll = trial(step * 0.5**k)
        if ll >= ll0:
            return cand, ll
    return theta, ll0


SCALE_PAIRS = (("delta", "eta1"), ("epsilon", "eta2"))


def rescale_update(theta, data, layout, pen=None, dlnm=True, limit=np.inf):
    """Move along the curved ridge ``(a_x c, eta / c)`` of each DLNM channel.

    Only the age scaling of the first age is pinned, so the product of a
    scaling block and its coefficient block is nearly invariant along this
    curve. Newton steps follow it poorly; a 1-D search on log c does not.
    The scalings are never pushed beyond ``limit`` in absolute value.
    """
    ll0 = penalized_loglik(theta, data, pen, dlnm)
    for a_name, eta_name in SCALE_PAIRS:
        if a_name not in layout.blocks or eta_name not in layout.blocks:
            continue
        if not np.any(getattr(theta, eta_name)):
            continue

        def scaled(logc, base=theta):
            c = np.exp(logc)
            a = np.array(getattr(base, a_name))
            a[1:] *= c
            return base.with_block(a_name, a).with_block(eta_name, getattr(base, eta_name) / c)

        def neg(logc):
            try:
                return -penalized_loglik(scaled(logc), data, pen, dlnm)
            except (NumericalError, FloatingPointError):
                return np.inf

        amax = float(np.max(np.abs(getattr(theta, a_name)[1:]), initial=0.0))
        hi = 2.0 if amax == 0 else min(2.0, np.log(limit / amax))
        if hi <= -2.0:
            continue
        res = minimize_scalar(neg, bounds=(-2.0, hi), method="bounded",
                              options={"xatol": 1e-6})
        if np.isfinite(res.fun) and -res.fun > ll0:
            theta, ll0 = scaled(res.x), -res.fun
    return theta, ll0


def runaway_channels(theta, layout, limit):
    """DLNM scaling blocks whose entries have reached ``limit``.

    When the first age shows no covariate effect the likelihood keeps rising
    as ``a[1:] -> inf`` and ``eta -> 0``: there is no finite maximizer.
    """
    return [a for a, _ in SCALE_PAIRS
            if a in layout.blocks and np.max(np.abs(getattr(theta, a))) >= limit * (1 - 1e-3)]


def _warn_runaway(theta, layout, config, label):
    if "phi_r" in layout.blocks:
        rho = theta.phi_x[:, None] + theta.phi_r[None, :]
        if np.max(rho) >= np.log(config.phi_max) - 1e-3:
            log.info("%s: dispersion at its bound %.3g for %d cells (Poisson limit)", label,
                     config.phi_max, int(np.sum(rho >= np.log(config.phi_max) - 1e-3)))
    runaway = runaway_channels(theta, layout, config.scale_limit)
    if runaway:
        log.warning("%s: %s held at %.3g; the DLNM term has no finite maximizer "
                    "(no detectable effect at the reference age)", label,
                    "/".join(runaway), config.scale_limit)


def within_bounds(theta, config):
    """Scalings and dispersions inside the limits of ``config``."""
    scale = max(np.max(np.abs(theta.delta)), np.max(np.abs(theta.epsilon)))
    rho = np.max(theta.phi_x[:, None] + theta.phi_r[None, :])
    return scale <= config.scale_limit * (1 + 1e-6) and rho <= np.log(config.phi_max)


def _cycle(theta, data, layout, pen, config, dlnm=True, label="fit"):
    feasible = lambda th: within_bounds(th, config)
    ll = penalized_loglik(theta, data, pen, dlnm)
    trace = [ll]
    gnorm = np.inf
    for it in range(1, config.max_iter + 1):
        for b in layout.blocks:
            theta, ll_b = newton_block_update(theta, data, b, pen, layout, dlnm,
                                              config.max_halvings, feasible=feasible)
            assert ll_b >= trace[-1] - 1e-9 * abs(trace[-1]), f"loglik decreased in {b}"
            trace.append(ll_b)
        if config.accelerate and len(layout.blocks) > 1:
            theta, ll_b = rescale_update(theta, data, layout, pen, dlnm, config.scale_limit)
            trace.append(ll_b)
            theta, ll_b = joint_newton_update(theta, data, layout, pen, dlnm,
                                              config.max_halvings, feasible)
            trace.append(ll_b)
        ll_new = trace[-1]
        rel = abs(ll_new - ll) / max(abs(ll), 1.0)
        ll = ll_new
        if rel < config.tol_ll:
            gnorm, gscaled = _grad_norm(theta, data, layout, pen, dlnm)
            # the scaled test covers coordinates whose raw gradient cannot reach
            # grad_tol within double precision of the log-likelihood
            if gnorm < config.grad_tol or gscaled < config.grad_tol:
                _warn_runaway(theta, layout, config, label)
                return theta, StageInfo(it, True, trace, gnorm)
    _warn_runaway(theta, layout, config, label)
    gnorm, _ = _grad_norm(theta, data, layout, pen, dlnm)
    log.warning("%s: no convergence after %d cycles (gradient norm %.3g)", label,
                config.max_iter, gnorm)
    return theta, StageInfo(config.max_iter, False, trace, gnorm)


def initial_params(data, Q1=None, Q2=None):
    """Moment-based starting values."""
    dims = data.dims
    X, T, W, R = data.deaths.shape
    th = ParamSet.initial(X, T, R, dims["Q1"] if Q1 is None else Q1,
                          dims["Q2"] if Q2 is None else Q2, W)
    d, e = data.deaths, data.exposures
    rate = d.sum(axis=(1, 2)) / e.sum(axis=(1, 2))
    th.alpha[:] = np.log(np.maximum(rate, 1e-8))
    flat = d.transpose(0, 3, 1, 2).reshape(X, R, -1)
    mean = flat.mean(axis=-1)
    var = flat.var(axis=-1, ddof=1) if flat.shape[-1] > 1 else mean
    with np.errstate(divide="ignore", invalid="ignore"):
        di = np.where(mean > 0, var / np.where(mean > 0, mean, 1.0), 1.0)
        phi = mean / np.maximum(di - 1.0, 0.1)
    phi = np.where(mean > 0, phi, 10.0)
    th.phi_r[:] = np.log(np.clip(np.median(phi, axis=0), 1.0, 1e4))
    return th


def fit_baseline(data, theta0=None, config=FitConfig()):
    """First stage: Lee-Carter blocks and dispersion, no DLNM terms."""
    theta = initial_params(data) if theta0 is None else theta0.copy()
    layout = layout_for(data, "baseline")
    theta = layout.project(theta)
    return _cycle(theta, data, layout, None, config, dlnm=False, label="baseline")


def fit_dlnm(data, theta, pen, config=FitConfig()):
    """Second stage: DLNM blocks under the penalty, baseline held fixed."""
    layout = layout_for(data, "dlnm")
    if not layout.blocks:
        return theta, StageInfo(0, True, [penalized_loglik(theta, data, pen)], 0.0)
    return _cycle(theta, data, layout, pen, config, dlnm=True, label="dlnm")


def fit_joint(data, theta, pen, config=FitConfig()):
    """Blockwise cycling over every block at once."""
    return _cycle(theta, data, layout_for(data, "full"), pen, config, dlnm=True, label="joint")


def effective_df(theta, data, pen, layout=None, H_unpen=None):
    """Trace of the unpenalized Hessian times the inverse penalized Hessian."""
    layout = layout or layout_for(data)
    if H_unpen is None:
        H_unpen = full_hessian(theta, data, layout, pen, penalized=False)
    H_pen = H_unpen - penalty_matrix(layout, pen)
    try:
        return float(np.trace(np.linalg.solve(H_pen, H_unpen)))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("penalized Hessian is singular") from exc


def fisher_covariance(theta, data, pen, layout=None, H_pen=None):
    """Inverse observed information ``[-H]^-1`` over the free coordinates."""
    layout = layout or layout_for(data)
    if H_pen is None:
        H_pen = full_hessian(theta, data, layout, pen, penalized=True)
    A = -0.5 * (H_pen + H_pen.T)
    vals, vecs = np.linalg.eigh(A)
    if vals[0] <= 0:
        v = vecs[:, 0]
        k = int(np.argmax(np.abs(v)))
        block = next(b for b in layout.blocks
                     if layout.free_slices[b].start <= k < layout.free_slices[b].stop)
        raise NumericalError(
            f"penalized Hessian is not negative definite (eigenvalue {-vals[0]:.3g}, "
            f"dominated by block {block!r})")
    cov = (vecs / vals) @ vecs.T
    return 0.5 * (cov + cov.T)


def _summarize(theta, data, pen, infos, meta=None):
    layout = layout_for(data)
    H_unpen = full_hessian(theta, data, layout, pen, penalized=False)
    H_pen = H_unpen - penalty_matrix(layout, pen)
    converged = all(i.converged for i in infos)
    try:
        cov = fisher_covariance(theta, data, pen, layout, H_pen)
        edf = effective_df(theta, data, pen, layout, H_unpen)
    except NumericalError as exc:
        if converged:
            raise
        # away from the optimum the Hessian need not be definite; report the
        # non-convergence rather than a covariance failure
        log.warning("no covariance at the unconverged point: %s", exc)
        cov = np.full((layout.n_free, layout.n_free), np.nan)
        edf = np.nan
    ll_u = nb_loglik(theta, data)
    ll_p = penalized_loglik(theta, data, pen)
    trace = [v for info in infos for v in info.trace]
    return FitResult(theta=theta, covariance=cov, loglik_pen=ll_p, loglik_unpen=ll_u, edf=edf,
                     aic=-2.0 * ll_p + 2.0 * edf, psi1=pen.psi1, psi2=pen.psi2,
                     iterations=sum(i.iterations for i in infos),
                     converged=converged, trace=trace,
                     week_effect=data.week_effect, meta=dict(meta or {}))


def _zero_penalty(data):
    R = data.deaths.shape[3]
    return PenaltyConfig(0.0, 0.0, np.zeros((R, R)))


def fit_model(data, pen=None, config=FitConfig(), theta0=None, meta=None, warm_start=False):
    """Two-step fit (plus optional joint refinement) with covariance and edf.

    With ``warm_start`` the staged fits are skipped and joint cycling starts
    directly from ``theta0``, which is much faster when ``theta0`` is close
    (refitting simulated replicates, for instance).
    """
    pen = pen or _zero_penalty(data)
    if warm_start:
        if theta0 is None:
            raise ValueError("warm_start needs theta0")
        theta = layout_for(data).project(theta0.copy())
        theta, info = fit_joint(data, theta, pen, config)
        return _summarize(theta, data, pen, [info], meta)
    theta, i1 = fit_baseline(data, theta0, config)
    theta, i2 = fit_dlnm(data, theta, pen, config)
    infos = [i1, i2]
    if config.refine:
        theta, i3 = fit_joint(data, theta, pen, config)
        infos.append(i3)
    return _summarize(theta, data, pen, infos, meta)


def select_smoothing(data, pen, grid1=DEFAULT_GRID, grid2=DEFAULT_GRID, config=FitConfig(),
                     baseline=None, tie_rtol=1e-7, meta=None):
    """Grid search of (psi1, psi2) by AIC with boustrophedon warm starts.

    Each grid point repeats the fitting procedure of :func:`fit_model`
    (DLNM stage, plus joint cycling when ``config.refine``), warm-started
    from the previous point. Returns
    ``(psi1, psi2, FitResult, table)`` where ``table`` lists
    ``(psi1, psi2, aic, edf, loglik_pen)`` for every successful point.
    """
    grid1, grid2 = np.asarray(grid1, float), np.asarray(grid2, float)
    if grid1.size == 0 or grid2.size == 0:
        raise ValueError("smoothing grids must be nonempty")
    if baseline is None:
        theta0, base_info = fit_baseline(data, None, config)
    else:
        theta0, base_info = baseline
    theta = theta0
    table, fits = [], {}
    for i, p1 in enumerate(grid1):
        row = grid2 if i % 2 == 0 else grid2[::-1]
        for p2 in row:
            p = pen.with_psi(p1, p2)
            try:
                if config.refine and table:
                    # neighbour already sits at a joint optimum
                    theta, info = fit_joint(data, theta, p, config)
                else:
                    theta, info = fit_dlnm(data, theta, p, config)
                    if config.refine:
                        theta, info = fit_joint(data, theta, p, config)
                lay = layout_for(data)
                H_unpen = full_hessian(theta, data, lay, p, penalized=False)
                edf = effective_df(theta, data, p, lay, H_unpen)
                llp = penalized_loglik(theta, data, p)
            except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
                warnings.warn(f"grid point ({p1:g}, {p2:g}) failed: {exc}")
                theta = theta0
                continue
            table.append((float(p1), float(p2), -2.0 * llp + 2.0 * edf, edf, llp))
            fits[(float(p1), float(p2))] = (theta, info)
    if not table:
        raise NumericalError("every smoothing grid point failed")
    best_aic = min(r[2] for r in table)
    tol = tie_rtol * max(abs(best_aic), 1.0)
    tied = [r for r in table if r[2] <= best_aic + tol]
    best = max(tied, key=lambda r: (r[0], r[1]))
    theta, info = fits[(best[0], best[1])]
    p = pen.with_psi(best[0], best[1])
    res = _summarize(theta, data, p, [base_info, info], meta)
    return best[0], best[1], res, table
