"""Negative-binomial log-likelihood of the weekly Lee-Carter DLNM model.

The linear predictor for cell (x, t, w, r) is::

    log mu = alpha[x, r] + beta[x] kappa[t, r] + gamma[x] lam[w, r]
             + delta[x] (Z1[r] @ eta1[r])[t, w] + epsilon[x] (Z2[r] @ eta2[r])[t, w]

with NB dispersion ``phi[x, r] = exp(phi_x[x] + phi_r[r])``. Derivatives are
taken analytically through two per-cell predictors, ``eta = log mu`` and
``rho = log phi``, and chained to the eleven parameter blocks.

Identifiability is imposed by eliminating constrained coordinates: the
first age of beta, gamma, delta and epsilon is 1, the first year of kappa
and the first week of lam are 0 for every region, and phi_x[0] equals minus
the sum of the remaining phi_x.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import digamma, gammaln, polygamma

BLOCKS = ("alpha", "beta", "kappa", "gamma", "lam", "delta", "eta1", "epsilon", "eta2",
          "phi_x", "phi_r")
BASELINE_BLOCKS = ("alpha", "beta", "kappa", "gamma", "lam", "phi_x", "phi_r")
DLNM_BLOCKS = ("delta", "eta1", "epsilon", "eta2")
DISPERSION_BLOCKS = ("phi_x", "phi_r")


class NumericalError(ArithmeticError):
    """Non-finite likelihood or an unusable Hessian."""


@dataclass(eq=False)
class ParamSet:
    alpha: np.ndarray    # (X, R)
    beta: np.ndarray     # (X,)
    kappa: np.ndarray    # (T, R)
    gamma: np.ndarray    # (X,)
    lam: np.ndarray      # (W, R)
    delta: np.ndarray    # (X,)
    eta1: np.ndarray     # (R, Q1)
    epsilon: np.ndarray  # (X,)
    eta2: np.ndarray     # (R, Q2)
    phi_x: np.ndarray    # (X,)
    phi_r: np.ndarray    # (R,)

    @classmethod
    def initial(cls, X, T, R, Q1=0, Q2=0, W=52):
        return cls(alpha=np.zeros((X, R)), beta=np.ones(X), kappa=np.zeros((T, R)),
                   gamma=np.ones(X), lam=np.zeros((W, R)), delta=np.ones(X),
                   eta1=np.zeros((R, Q1)), epsilon=np.ones(X), eta2=np.zeros((R, Q2)),
                   phi_x=np.zeros(X), phi_r=np.zeros(R))

    def copy(self):
        return ParamSet(**{f.name: np.array(getattr(self, f.name), dtype=float)
                           for f in fields(self)})

    def with_block(self, name, value):
        old = getattr(self, name)
        return replace(self, **{name: np.asarray(value, dtype=float).reshape(old.shape)})

    @property
    def dispersion(self):
        with np.errstate(over="ignore"):
            return np.exp(self.phi_x[:, None] + self.phi_r[None, :])

    def to_dict(self):
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        out = {}
        for f in fields(cls):
            out[f.name] = np.asarray(d[f.name], dtype=float)
        # empty 2-D blocks lose their shape in JSON
        R = out["phi_r"].size
        for name in ("eta1", "eta2"):
            if out[name].size == 0:
                out[name] = np.zeros((R, 0))
        return cls(**out)

    def permute_regions(self, pos):
        """Reorder regions; ``pos[i]`` is the old index of new region i."""
        pos = np.asarray(pos)
        return replace(self, alpha=self.alpha[:, pos], kappa=self.kappa[:, pos],
                       lam=self.lam[:, pos], eta1=self.eta1[pos], eta2=self.eta2[pos],
                       phi_r=self.phi_r[pos])


def build_laplacian(graph):
    """Graph Laplacian: degree on the diagonal, -1 for neighbours."""
    a = np.asarray(graph.adjacency if hasattr(graph, "adjacency") else graph, dtype=float)
    return np.diag(a.sum(axis=1)) - a


@dataclass(frozen=True)
class PenaltyConfig:
    psi1: float
    psi2: float
    laplacian: np.ndarray

    def __post_init__(self):
        if self.psi1 < 0 or self.psi2 < 0:
            raise ValueError("smoothing weights must be nonnegative")
        L = np.asarray(self.laplacian, dtype=float)
        if not np.allclose(L, L.T) or not np.allclose(L.sum(axis=1), 0.0):
            raise ValueError("Laplacian must be symmetric with zero row sums")
        object.__setattr__(self, "laplacian", L)

    def with_psi(self, psi1, psi2):
        return PenaltyConfig(float(psi1), float(psi2), self.laplacian)


@dataclass(eq=False)
class ModelData:
    """Observed counts and design pieces for one fit.

    ``Z1``/``Z2`` are cross-bases stacked per region with shape (R, T*52, Q).
    """
    deaths: np.ndarray
    exposures: np.ndarray
    Z1: np.ndarray | None = None
    Z2: np.ndarray | None = None
    week_effect: bool = True
    log_e: np.ndarray = field(init=False, repr=False)
    lgd1: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.deaths = np.asarray(self.deaths, dtype=float)
        self.exposures = np.asarray(self.exposures, dtype=float)
        self.log_e = np.log(self.exposures)
        self.lgd1 = gammaln(self.deaths + 1.0)
        X, T, W, R = self.deaths.shape
        for name in ("Z1", "Z2"):
            Z = getattr(self, name)
            if Z is None:
                setattr(self, name, np.zeros((R, T * W, 0)))
            elif Z.shape[:2] != (R, T * W):
                raise ValueError(f"{name} has shape {Z.shape}, expected ({R}, {T * W}, Q)")

    @classmethod
    def from_panel(cls, panel, Z1=None, Z2=None, week_effect=True):
        return cls(panel.deaths, panel.exposures, Z1, Z2, week_effect)

    @property
    def dims(self):
        X, T, W, R = self.deaths.shape
        return dict(X=X, T=T, W=W, R=R, Q1=self.Z1.shape[2], Q2=self.Z2.shape[2])


# ---------------------------------------------------------------------------
# free-coordinate layout

def _block_shape(name, dims):
    X, T, W, R, Q1, Q2 = (dims[k] for k in ("X", "T", "W", "R", "Q1", "Q2"))
    return {"alpha": (X, R), "beta": (X,), "kappa": (T, R), "gamma": (X,), "lam": (W, R),
            "delta": (X,), "eta1": (R, Q1), "epsilon": (X,), "eta2": (R, Q2),
            "phi_x": (X,), "phi_r": (R,)}[name]


@dataclass(frozen=True, eq=False)
class BlockMap:
    """Affine map ``flat_block = offset + M @ free``."""
    name: str
    shape: tuple
    free_idx: np.ndarray
    offset: np.ndarray
    M: np.ndarray

    @property
    def n_free(self):
        return self.free_idx.size

    @property
    def n_full(self):
        return int(np.prod(self.shape))


def block_map(name, dims):
    shape = _block_shape(name, dims)
    n = int(np.prod(shape))
    offset = np.zeros(n)
    if name in ("beta", "gamma", "delta", "epsilon"):
        free = np.arange(1, n)
        offset[0] = 1.0
    elif name in ("kappa", "lam"):
        R = shape[1]
        free = np.arange(R, n)       # first year / first week fixed at zero
    else:
        free = np.arange(n)
    if name == "phi_x":
        free = np.arange(1, n)
        M = np.zeros((n, free.size))
        M[0, :] = -1.0
        M[free, np.arange(free.size)] = 1.0
    else:
        M = np.zeros((n, free.size))
        M[free, np.arange(free.size)] = 1.0
    return BlockMap(name, shape, free, offset, M)


class Layout:
    """Ordered set of active blocks and their free coordinates."""

    def __init__(self, dims, blocks):
        self.dims = dict(dims)
        self.blocks = tuple(b for b in BLOCKS if b in blocks)
        self.maps = {b: block_map(b, dims) for b in self.blocks}
        self.free_slices, self.full_slices = {}, {}
        i = j = 0
        for b in self.blocks:
            m = self.maps[b]
            self.free_slices[b] = slice(i, i + m.n_free)
            self.full_slices[b] = slice(j, j + m.n_full)
            i += m.n_free
            j += m.n_full
        self.n_free, self.n_full = i, j

    def pack(self, theta):
        return np.concatenate([np.ravel(getattr(theta, b))[self.maps[b].free_idx]
                               for b in self.blocks]) if self.blocks else np.zeros(0)

    def unpack(self, u, theta):
        out = theta.copy()
        for b in self.blocks:
            m = self.maps[b]
            out = out.with_block(b, m.offset + m.M @ u[self.free_slices[b]])
        return out

    def project(self, theta):
        return self.unpack(self.pack(theta), theta)

    def transform(self):
        """Block-diagonal (n_full, n_free) matrix mapping free to full coordinates."""
        T = np.zeros((self.n_full, self.n_free))
        for b in self.blocks:
            T[self.full_slices[b], self.free_slices[b]] = self.maps[b].M
        return T

    def labels(self):
        """Human-readable label for every free coordinate."""
        out = []
        for b in self.blocks:
            m = self.maps[b]
            for k in m.free_idx:
                out.append((b,) + tuple(int(i) for i in np.unravel_index(k, m.shape)))
        return out

    def n_constraints(self):
        return sum(m.n_full - m.n_free for m in self.maps.values())


# ---------------------------------------------------------------------------
# likelihood pieces

def dlnm_terms(theta, data):
    """DLNM contributions F1, F2 with shape (T, W, R)."""
    X, T, W, R = data.deaths.shape
    F1 = np.einsum("rnq,rq->nr", data.Z1, theta.eta1).reshape(T, W, R)
    F2 = np.einsum("rnq,rq->nr", data.Z2, theta.eta2).reshape(T, W, R)
    return F1, F2


def log_mu(theta, data, dlnm=True):
    """Log force of mortality, shape (X, T, W, R)."""
    eta = (theta.alpha[:, None, None, :]
           + theta.beta[:, None, None, None] * theta.kappa[None, :, None, :])
    if data.week_effect:
        eta = eta + theta.gamma[:, None, None, None] * theta.lam[None, None, :, :]
    if dlnm and (data.Z1.shape[2] or data.Z2.shape[2]):
        F1, F2 = dlnm_terms(theta, data)
        eta = eta + (theta.delta[:, None, None, None] * F1[None]
                     + theta.epsilon[:, None, None, None] * F2[None])
    return eta


_STIRLING_MIN = 20.0


def lgamma_ratio(d, phi):
    """log Gamma(d + phi) - log Gamma(phi), stable when phi is large.

    The plain difference cancels to about ulp(log Gamma(phi)); beyond
    ``_STIRLING_MIN`` the difference of Stirling series is used instead; the
    first omitted term is below 1e-14 there.
    """
    d, phi = np.broadcast_arrays(np.asarray(d, float), np.asarray(phi, float))
    out = np.empty(d.shape)
    big = phi >= _STIRLING_MIN
    small = ~big
    out[small] = gammaln(d[small] + phi[small]) - gammaln(phi[small])
    if big.any():
        x, p = d[big], phi[big]
        q = p + x
        out[big] = (x * np.log(p) + (q - 0.5) * np.log1p(x / p) - x
                    + (1.0 / q - 1.0 / p) / 12.0 - (q**-3 - p**-3) / 360.0
                    + (q**-5 - p**-5) / 1260.0 - (q**-7 - p**-7) / 1680.0)
    return out


def _cell_loglik(d, logm, phi, lgd1):
    # trial points of a line search may overflow; the caller sees -inf/nan
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        m = np.exp(logm)
        log_ratio = np.where(d > 0, logm - np.log(m + phi), 0.0)
        return (lgamma_ratio(d, phi) - lgd1
                + d * log_ratio - phi * np.log1p(m / phi))


def cell_loglik(theta, data, dlnm=True):
    eta = log_mu(theta, data, dlnm)
    phi = theta.dispersion[:, None, None, :]
    return _cell_loglik(data.deaths, eta + data.log_e, phi, data.lgd1)


def nb_loglik(theta, data, dlnm=True):
    ll = cell_loglik(theta, data, dlnm)
    total = float(np.sum(ll))
    if not np.isfinite(total):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(ll))[0])
        raise NumericalError(f"non-finite log-likelihood at cell (x, t, w, r) = {bad}")
    return total


def _edge_form(L, eta):
    """``eta' L eta`` and ``L eta`` from neighbour differences.

    With zero row sums both equal the matrix products, but region-constant
    ``eta`` gives exact zeros.
    """
    diff = eta[:, None, :] - eta[None, :, :]            # (R, R, Q)
    w = -L
    np.fill_diagonal(w, 0.0)
    Leta = np.einsum("rs,rsq->rq", w, diff)
    iu = np.triu_indices(L.shape[0], 1)
    quad = float(np.sum(w[iu][:, None] * diff[iu] ** 2))
    return quad, Leta


def penalty_value(theta, pen):
    val = 0.0
    if theta.eta1.size and pen.psi1:
        val += 0.5 * pen.psi1 * _edge_form(pen.laplacian, theta.eta1)[0]
    if theta.eta2.size and pen.psi2:
        val += 0.5 * pen.psi2 * _edge_form(pen.laplacian, theta.eta2)[0]
    return val


def penalized_loglik(theta, data, pen=None, dlnm=True):
    ll = nb_loglik(theta, data, dlnm)
    return ll if pen is None else ll - penalty_value(theta, pen)


@dataclass(eq=False)
class CellTerms:
    """Per-cell derivatives of the log-likelihood in (eta, rho)."""
    eta: np.ndarray
    m: np.ndarray
    phi: np.ndarray
    w1: np.ndarray        # d l / d eta
    w2: np.ndarray        # d2 l / d eta2
    g_rho: np.ndarray | None = None
    h_rho: np.ndarray | None = None
    h_eta_rho: np.ndarray | None = None


def cell_terms(theta, data, dispersion=True, dlnm=True):
    eta = log_mu(theta, data, dlnm)
    d = data.deaths
    m = np.exp(eta + data.log_e)
    phi = theta.dispersion[:, None, None, :]
    s = m + phi
    w1 = phi * (d - m) / s
    w2 = -(d + phi) * m * phi / s**2
    out = CellTerms(eta, m, phi, w1, w2)
    if dispersion:
        g_phi = (digamma(d + phi) - digamma(phi) - np.log1p(m / phi) + (m - d) / s)
        h_phi = (polygamma(1, d + phi) - polygamma(1, phi) + 1.0 / phi - 2.0 / s
                 + (d + phi) / s**2)
        out.g_rho = phi * g_phi
        out.h_rho = phi**2 * h_phi + out.g_rho
        out.h_eta_rho = phi * (d - m) * m / s**2
    return out


def _bcast(a, shape):
    return np.broadcast_to(a, shape)


def block_derivatives(theta, data, block, terms=None, pen=None, dlnm=True):
    """Gradient and Hessian of the penalized log-likelihood in one block.

    Both are returned in full (unconstrained) block coordinates, flattened in
    C order; use :class:`Layout` maps to reduce to free coordinates.
    """
    disp = block in DISPERSION_BLOCKS
    if terms is None or (disp and terms.g_rho is None):
        terms = cell_terms(theta, data, dispersion=disp, dlnm=dlnm)
    w1, w2 = terms.w1, terms.w2
    X, T, W, R = data.deaths.shape
    shape = w1.shape
    if block == "alpha":
        g, h = w1.sum(axis=(1, 2)), w2.sum(axis=(1, 2))
        return g.ravel(), np.diag(h.ravel())
    if block == "beta":
        k = theta.kappa[None, :, None, :]
        return (w1 * k).sum(axis=(1, 2, 3)), np.diag((w2 * k**2).sum(axis=(1, 2, 3)))
    if block == "kappa":
        b = theta.beta[:, None, None, None]
        g = (w1 * b).sum(axis=(0, 2))
        h = (w2 * b**2).sum(axis=(0, 2))
        return g.ravel(), np.diag(h.ravel())
    if block == "gamma":
        lam = theta.lam[None, None, :, :] if data.week_effect else 0.0
        return (w1 * lam).sum(axis=(1, 2, 3)), np.diag((w2 * lam**2).sum(axis=(1, 2, 3)))
    if block == "lam":
        gm = theta.gamma[:, None, None, None] if data.week_effect else 0.0
        g = _bcast(w1 * gm, shape).sum(axis=(0, 1))
        h = _bcast(w2 * gm**2, shape).sum(axis=(0, 1))
        return g.ravel(), np.diag(h.ravel())
    if block in ("delta", "epsilon"):
        F = dlnm_terms(theta, data)[0 if block == "delta" else 1][None]
        return (w1 * F).sum(axis=(1, 2, 3)), np.diag((w2 * F**2).sum(axis=(1, 2, 3)))
    if block in ("eta1", "eta2"):
        Z = data.Z1 if block == "eta1" else data.Z2
        a = theta.delta if block == "eta1" else theta.epsilon
        psi = 0.0 if pen is None else (pen.psi1 if block == "eta1" else pen.psi2)
        Q = Z.shape[2]
        s1 = np.einsum("xtwr,x->rtw", w1, a).reshape(R, T * W)
        s2 = np.einsum("xtwr,x->rtw", w2, a**2).reshape(R, T * W)
        g = np.einsum("rnq,rn->rq", Z, s1)
        H = np.zeros((R * Q, R * Q))
        for r in range(R):
            H[r * Q:(r + 1) * Q, r * Q:(r + 1) * Q] = (Z[r] * s2[r][:, None]).T @ Z[r]
        if psi:
            eta = theta.eta1 if block == "eta1" else theta.eta2
            g = g - psi * _edge_form(pen.laplacian, eta)[1]
            H = H - psi * np.kron(pen.laplacian, np.eye(Q))
        return g.ravel(), H
    if block == "phi_x":
        return terms.g_rho.sum(axis=(1, 2, 3)), np.diag(terms.h_rho.sum(axis=(1, 2, 3)))
    if block == "phi_r":
        return terms.g_rho.sum(axis=(0, 1, 2)), np.diag(terms.h_rho.sum(axis=(0, 1, 2)))
    raise KeyError(f"unknown block {block!r}")


def gradient_block(theta, data, block, layout=None, pen=None, terms=None):
    """Gradient in the free coordinates of one block."""
    g, _ = block_derivatives(theta, data, block, terms, pen)
    M = (layout.maps[block] if layout else block_map(block, data.dims)).M
    return M.T @ g


def hessian_block(theta, data, block, layout=None, pen=None, terms=None):
    """Hessian in the free coordinates of one block."""
    _, H = block_derivatives(theta, data, block, terms, pen)
    M = (layout.maps[block] if layout else block_map(block, data.dims)).M
    return M.T @ H @ M


# ---------------------------------------------------------------------------
# joint derivatives over all active blocks

def _eta_jacobian(theta, data, layout, F1, F2):
    """Sparse d eta / d theta over full coordinates of the active eta blocks."""
    X, T, W, R = data.deaths.shape
    N = X * T * W * R
    cells = np.arange(N).reshape(X, T, W, R)
    xi, ti, wi, ri = np.meshgrid(np.arange(X), np.arange(T), np.arange(W), np.arange(R),
                                 indexing="ij")
    rows, cols, vals = [], [], []

    def add(block, col_local, value):
        if block not in layout.blocks:
            return
        off = layout.full_slices[block].start
        rows.append(cells.ravel())
        cols.append((off + col_local).ravel())
        vals.append(np.broadcast_to(value, cells.shape).ravel())

    add("alpha", xi * R + ri, 1.0)
    add("beta", xi, theta.kappa[None, :, None, :])
    add("kappa", ti * R + ri, theta.beta[:, None, None, None])
    if data.week_effect:
        add("gamma", xi, theta.lam[None, None, :, :])
        add("lam", wi * R + ri, theta.gamma[:, None, None, None])
    add("delta", xi, F1[None])
    add("epsilon", xi, F2[None])
    for block, Z, a in (("eta1", data.Z1, theta.delta), ("eta2", data.Z2, theta.epsilon)):
        Q = Z.shape[2]
        if block not in layout.blocks or Q == 0:
            continue
        off = layout.full_slices[block].start
        # Z[r, t*W + w, q] arranged to (X, T, W, R, Q)
        Zc = Z.reshape(R, T, W, Q).transpose(1, 2, 0, 3)[None]
        v = a[:, None, None, None, None] * Zc
        c = off + ri[..., None] * Q + np.arange(Q)
        rows.append(np.broadcast_to(cells[..., None], c.shape).ravel())
        cols.append(c.ravel())
        vals.append(np.broadcast_to(v, c.shape).ravel())
    if not rows:
        return sp.csr_matrix((N, layout.n_full))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N, layout.n_full))


def _rho_jacobian(data, layout):
    X, T, W, R = data.deaths.shape
    N = X * T * W * R
    xi, _, _, ri = np.meshgrid(np.arange(X), np.arange(T), np.arange(W), np.arange(R),
                               indexing="ij")
    rows, cols = [], []
    for block, idx in (("phi_x", xi), ("phi_r", ri)):
        if block in layout.blocks:
            rows.append(np.arange(N))
            cols.append(layout.full_slices[block].start + idx.ravel())
    if not rows:
        return sp.csr_matrix((N, layout.n_full))
    r, c = np.concatenate(rows), np.concatenate(cols)
    return sp.csr_matrix((np.ones(r.size), (r, c)), shape=(N, layout.n_full))


def full_gradient(theta, data, layout, pen=None, dlnm=True):
    """Gradient of the (penalized) log-likelihood over free coordinates."""
    parts = np.zeros(layout.n_full)
    terms = cell_terms(theta, data, any(b in layout.blocks for b in DISPERSION_BLOCKS), dlnm)
    for b in layout.blocks:
        g, _ = block_derivatives(theta, data, b, terms, pen, dlnm)
        parts[layout.full_slices[b]] = g
    return layout.transform().T @ parts


def full_hessian(theta, data, layout, pen=None, penalized=True, dlnm=True):
    """Hessian over all free coordinates of ``layout``, cross-blocks included."""
    X, T, W, R = data.deaths.shape
    disp = any(b in layout.blocks for b in DISPERSION_BLOCKS)
    terms = cell_terms(theta, data, dispersion=disp, dlnm=dlnm)
    F1, F2 = dlnm_terms(theta, data)
    J = _eta_jacobian(theta, data, layout, F1, F2)
    w2 = terms.w2.ravel()
    H = (J.T @ J.multiply(w2[:, None])).toarray()
    if disp:
        Jr = _rho_jacobian(data, layout)
        H += (Jr.T @ Jr.multiply(terms.h_rho.ravel()[:, None])).toarray()
        cross = (J.T @ Jr.multiply(terms.h_eta_rho.ravel()[:, None])).toarray()
        H += cross + cross.T

    w1 = terms.w1

    def put(a, b, block):
        if a in layout.blocks and b in layout.blocks:
            sa, sb = layout.full_slices[a], layout.full_slices[b]
            H[sa, sb] += block
            H[sb, sa] += block.T

    # bilinear second-derivative terms of eta
    put("beta", "kappa", np.einsum("xtwr->xtr", w1).reshape(X, T * R))
    if data.week_effect:
        put("gamma", "lam", np.einsum("xtwr->xwr", w1).reshape(X, W * R))
    for a, b, Z in (("delta", "eta1", data.Z1), ("epsilon", "eta2", data.Z2)):
        Q = Z.shape[2]
        if Q and a in layout.blocks and b in layout.blocks:
            wr = w1.transpose(0, 3, 1, 2).reshape(X, R, T * W)
            put(a, b, np.einsum("xrn,rnq->xrq", wr, Z).reshape(X, R * Q))

    if penalized and pen is not None:
        for b, psi in (("eta1", pen.psi1), ("eta2", pen.psi2)):
            if b in layout.blocks and psi:
                Q = layout.maps[b].shape[1]
                s = layout.full_slices[b]
                H[s, s] -= psi * np.kron(pen.laplacian, np.eye(Q))
    Tm = layout.transform()
    Hf = Tm.T @ H @ Tm
    return 0.5 * (Hf + Hf.T)


def layout_for(data, stage="full"):
    """Layout of the blocks estimated in a given stage."""
    dims = data.dims
    base = list(BASELINE_BLOCKS)
    if not data.week_effect:
        base = [b for b in base if b not in ("gamma", "lam")]
    dl = []
    if dims["Q1"]:
        dl += ["delta", "eta1"]
    if dims["Q2"]:
        dl += ["epsilon", "eta2"]
    if stage == "baseline":
        return Layout(dims, base)
    if stage == "dlnm":
        return Layout(dims, dl)
    return Layout(dims, base + dl)


def penalty_matrix(layout, pen):
    """Hessian of the penalty term over the free coordinates of ``layout``."""
    P = np.zeros((layout.n_free, layout.n_free))
    if pen is None:
        return P
    for b, psi in (("eta1", pen.psi1), ("eta2", pen.psi2)):
        if b in layout.blocks and psi:
            Q = layout.maps[b].shape[1]
            s = layout.free_slices[b]
            P[s, s] = psi * np.kron(pen.laplacian, np.eye(Q))
    return P
