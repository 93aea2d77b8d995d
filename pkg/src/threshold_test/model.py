"""Generative threshold model: link functions, cell rates, likelihood, prior.

The sampler-facing density lives on an unconstrained vector with scales
log-transformed.  Layout::

    phi_r[R] lambda_r[R] mu_phi log_sigma_phi mu_lambda log_sigma_lambda
    phi_d[D-1] lambda_d[D-1] mu_t[R] log_sigma_t[R] t[R*D]

In the centered layout (default) the department blocks hold the effects
and ``t`` holds logit-thresholds.  In the non-centered layout they hold
standardized offsets, mapped through location + scale * offset.  The
department blocks skip the reference department, whose effects are pinned
to zero.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .special import _beta_logpdf, _log1mexp, _log_tails

logger = logging.getLogger(__name__)

PRIOR_SD = 2.0
PROB_CLIP = 1e-12
LAMBDA_EXP_BOUND = 20.0
# beyond these the logistic saturates in float64; gradients are zeroed there
LOGIT_BOUND = 30.0

_LOG_CLIP = math.log(PROB_CLIP)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


class DegenerateCellError(ValueError):
    """Raised when the probability of a search underflows for a cell."""


# ---------------------------------------------------------------------------
# data containers


@dataclass
class CountsTable:
    """Stops, searches and hits per (group, department) cell.

    Arrays have shape ``(len(groups), len(depts))``; absent cells hold zeros.
    """

    groups: list[str]
    depts: list[str]
    n: np.ndarray
    searches: np.ndarray
    hits: np.ndarray

    def __post_init__(self):
        self.groups = [str(g) for g in self.groups]
        self.depts = [str(d) for d in self.depts]
        shape = (len(self.groups), len(self.depts))
        self.n = np.asarray(self.n, dtype=np.int64).reshape(shape)
        self.searches = np.asarray(self.searches, dtype=np.int64).reshape(shape)
        self.hits = np.asarray(self.hits, dtype=np.int64).reshape(shape)
        if len(set(self.groups)) != len(self.groups) or len(set(self.depts)) != len(self.depts):
            raise ValueError("duplicate group or department labels")
        if (self.hits < 0).any() or (self.hits > self.searches).any() or (self.searches > self.n).any():
            raise ValueError("counts must satisfy 0 <= hits <= searches <= n in every cell")

    @classmethod
    def from_cells(cls, cells, groups=None, depts=None) -> "CountsTable":
        """Build from an iterable of ``(group, dept, n, searches, hits)`` tuples.

        Counts for a repeated cell are summed.
        """
        cells = list(cells)
        groups = list(groups) if groups is not None else sorted({c[0] for c in cells})
        depts = list(depts) if depts is not None else sorted({c[1] for c in cells})
        gi = {g: i for i, g in enumerate(groups)}
        di = {d: j for j, d in enumerate(depts)}
        arr = np.zeros((3, len(groups), len(depts)), dtype=np.int64)
        for g, d, n, s, h in cells:
            arr[:, gi[g], di[d]] += (n, s, h)
        return cls(groups, depts, arr[0], arr[1], arr[2])

    @property
    def shape(self) -> tuple[int, int]:
        return self.n.shape

    def is_empty(self) -> bool:
        return self.n.size == 0

    def cells(self):
        for i, g in enumerate(self.groups):
            for j, d in enumerate(self.depts):
                yield g, d, int(self.n[i, j]), int(self.searches[i, j]), int(self.hits[i, j])

    def dept_stop_counts(self) -> np.ndarray:
        return self.n.sum(axis=0)

    def reference_dept(self) -> int:
        """Index of the department with the most stops (ties: smallest label)."""
        if not self.depts:
            raise ValueError("no departments")
        totals = self.dept_stop_counts()
        return min(range(len(self.depts)), key=lambda j: (-totals[j], self.depts[j]))


@dataclass
class CellSignal:
    """Beta signal distribution of one cell in mean / total-count form."""

    phi: float
    lam: float

    def __post_init__(self):
        if not (0.0 < self.phi < 1.0) or not self.lam > 0:
            raise ValueError(f"invalid cell signal phi={self.phi}, lam={self.lam}")

    @classmethod
    def from_beta(cls, alpha: float, beta: float) -> "CellSignal":
        return cls(alpha / (alpha + beta), alpha + beta)

    @property
    def a(self) -> float:
        return self.phi * self.lam

    @property
    def b(self) -> float:
        return (1.0 - self.phi) * self.lam

    @property
    def mu(self) -> float:
        return (self.phi * self.lam + 1.0) / (self.lam + 1.0)


@dataclass
class ModelParams:
    """Constrained parameters of the threshold model.

    ``t`` has shape ``(R, D)``; ``mu_t``/``sigma_t`` are per group.
    ``ref`` is the reference department, whose ``phi_d``/``lambda_d`` are 0.
    """

    phi_r: np.ndarray
    lambda_r: np.ndarray
    phi_d: np.ndarray
    lambda_d: np.ndarray
    t: np.ndarray
    mu_phi: float
    sigma_phi: float
    mu_lambda: float
    sigma_lambda: float
    mu_t: np.ndarray
    sigma_t: np.ndarray
    ref: int = 0

    def __post_init__(self):
        for name in ("phi_r", "lambda_r", "phi_d", "lambda_d", "mu_t", "sigma_t"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).copy())
        self.t = np.atleast_2d(np.asarray(self.t, dtype=float)).copy()

    def validate(self) -> None:
        if not (self.sigma_phi > 0 and self.sigma_lambda > 0 and np.all(self.sigma_t > 0)):
            raise ValueError("scale hyperparameters must be positive")
        if not np.all((self.t > 0) & (self.t < 1)):
            raise ValueError("thresholds must lie in (0, 1)")
        if self.phi_d[self.ref] != 0.0 or self.lambda_d[self.ref] != 0.0:
            raise ValueError("reference department effects must be exactly 0")

    @property
    def n_groups(self) -> int:
        return len(self.phi_r)

    @property
    def n_depts(self) -> int:
        return len(self.phi_d)

    def cell_phi(self) -> np.ndarray:
        return link_phi(self.phi_r[:, None], self.phi_d[None, :])

    def cell_lambda(self) -> np.ndarray:
        return link_lambda(self.lambda_r[:, None], self.lambda_d[None, :])


# ---------------------------------------------------------------------------
# link functions and cell rates


def link_phi(phi_r, phi_d):
    """Mean of the signal distribution, inverse-logit of the summed effects."""
    return _expit(np.add(phi_r, phi_d))


def link_lambda(lambda_r, lambda_d):
    """Total-count parameter, exp of the summed effects clamped to +-20."""
    return np.exp(np.clip(np.add(lambda_r, lambda_d), -LAMBDA_EXP_BOUND, LAMBDA_EXP_BOUND))


def _expit(x):
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return out if out.ndim else float(out)


def _logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def search_prob(cell: CellSignal, t: float) -> float:
    """Probability that the signal reaches the threshold ``t``."""
    if not (0.0 < t < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    _, _, _, logU, _, _, _ = _log_tails(float(t), cell.a, cell.b)
    return math.exp(logU)


def hit_prob(cell: CellSignal, t: float) -> float:
    """Mean signal among stops whose signal reaches ``t``.

    Evaluated as a ratio of upper tails in log space, so thresholds far into
    the tail stay finite as long as the tail itself is representable.
    """
    if not (0.0 < t < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    logU1 = _log_tails(float(t), cell.a, cell.b)[3]
    if logU1 < math.log(1e-300):
        raise DegenerateCellError(f"search probability underflows at t={t} for {cell}")
    logU2 = _log_tails(float(t), cell.a + 1.0, cell.b)[3]
    return math.exp(math.log(cell.phi) + logU2 - logU1)


def cell_rates(params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Analytic search and hit probabilities for every cell, shape ``(R, D)``."""
    eta_phi = params.phi_r[:, None] + params.phi_d[None, :]
    eta_lam = params.lambda_r[:, None] + params.lambda_d[None, :]
    p, q = _rates(eta_phi.ravel(), eta_lam.ravel(), _logit(params.t).ravel())
    return p.reshape(params.t.shape), q.reshape(params.t.shape)


@numba.njit(cache=True)
def _cell_signal(eta_phi, eta_lam):
    ep = min(max(eta_phi, -LOGIT_BOUND), LOGIT_BOUND)
    if ep >= 0:
        e = math.exp(-ep)
        phi = 1.0 / (1.0 + e)
        phic = e / (1.0 + e)
    else:
        e = math.exp(ep)
        phi = e / (1.0 + e)
        phic = 1.0 / (1.0 + e)
    el = min(max(eta_lam, -LAMBDA_EXP_BOUND), LAMBDA_EXP_BOUND)
    lam = math.exp(el)
    return phi, phic, lam


@numba.njit(cache=True)
def _threshold(logit_t):
    lt = min(max(logit_t, -LOGIT_BOUND), LOGIT_BOUND)
    if lt >= 0:
        e = math.exp(-lt)
        return 1.0 / (1.0 + e)
    e = math.exp(lt)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _rates(eta_phi, eta_lam, logit_t):
    k = eta_phi.shape[0]
    p = np.empty(k)
    q = np.empty(k)
    for i in range(k):
        phi, phic, lam = _cell_signal(eta_phi[i], eta_lam[i])
        a = phi * lam
        b = phic * lam
        x = _threshold(logit_t[i])
        logU1 = _log_tails(x, a, b)[3]
        logU2 = _log_tails(x, a + 1.0, b)[3]
        p[i] = math.exp(logU1)
        q[i] = math.exp(min(math.log(phi) + logU2 - logU1, 0.0))
    return p, q


@numba.njit(cache=True)
def _lchoose(n, k):
    return math.lgamma(n + 1.0) - math.lgamma(k + 1.0) - math.lgamma(n - k + 1.0)


@numba.njit(cache=True)
def _cells_loglik(eta_phi, eta_lam, logit_t, n, S, H, clip, g_phi, g_lam, g_t):
    """Summed binomial log-likelihood over cells; fills per-cell gradients.

    With ``clip`` the probabilities are held inside [1e-12, 1 - 1e-12] and
    the gradient is zero where a clip is active.  Without it, an interior
    count facing a probability of exactly 0 or 1 makes the total ``-inf``.
    """
    total = 0.0
    k = eta_phi.shape[0]
    for i in range(k):
        g_phi[i] = 0.0
        g_lam[i] = 0.0
        g_t[i] = 0.0
        ni = n[i]
        if ni == 0:
            continue
        si = S[i]
        hi = H[i]
        phi, phic, lam = _cell_signal(eta_phi[i], eta_lam[i])
        a = phi * lam
        b = phic * lam
        x = _threshold(logit_t[i])
        L1, L1_a, L1_b, U1, U1_a, U1_b, _ = _log_tails(x, a, b)
        lpdf1 = _beta_logpdf(x, a, b)
        U1_x = -math.exp(lpdf1 - U1)
        L1_x = math.exp(lpdf1 - L1)

        lp = U1
        l1p = L1
        cp = 1.0
        c1p = 1.0
        if clip:
            if lp < _LOG_CLIP:
                lp = _LOG_CLIP
                cp = 0.0
            if l1p < _LOG_CLIP:
                l1p = _LOG_CLIP
                c1p = 0.0
        ll = _lchoose(ni, si)
        if si > 0:
            ll += si * lp
        if ni - si > 0:
            ll += (ni - si) * l1p
        d_a = si * cp * U1_a + (ni - si) * c1p * L1_a
        d_b = si * cp * U1_b + (ni - si) * c1p * L1_b
        d_x = si * cp * U1_x + (ni - si) * c1p * L1_x
        g_q = 0.0
        if si > 0:
            L2, L2_a, L2_b, U2, U2_a, U2_b, _ = _log_tails(x, a + 1.0, b)
            lpdf2 = _beta_logpdf(x, a + 1.0, b)
            U2_x = -math.exp(lpdf2 - U2)
            lq = math.log(phi) + U2 - U1
            if lq > 0.0:
                lq = 0.0
            cq = 1.0
            if clip and lq < _LOG_CLIP:
                lq = _LOG_CLIP
                cq = 0.0
            l1q = _log1mexp(lq) if lq < 0.0 else -np.inf
            c1q = cq * (-1.0 / math.expm1(-lq)) if lq < 0.0 else 0.0
            if clip and l1q < _LOG_CLIP:
                l1q = _LOG_CLIP
                c1q = 0.0
            ll += _lchoose(si, hi)
            if hi > 0:
                ll += hi * lq
            if si - hi > 0:
                ll += (si - hi) * l1q
            g_q = hi * cq + (si - hi) * c1q
            d_a += g_q * (U2_a - U1_a)
            d_b += g_q * (U2_b - U1_b)
            d_x += g_q * (U2_x - U1_x)
        total += ll
        # chain rule to the linear predictors
        dphi = phi * phic
        if -LOGIT_BOUND < eta_phi[i] < LOGIT_BOUND:
            g_phi[i] = (d_a - d_b) * lam * dphi + g_q * phic
        if -LAMBDA_EXP_BOUND < eta_lam[i] < LAMBDA_EXP_BOUND:
            g_lam[i] = d_a * a + d_b * b
        if -LOGIT_BOUND < logit_t[i] < LOGIT_BOUND:
            g_t[i] = d_x * x * (1.0 - x)
    return total


def binomial_loglik(n: int, searches: int, hits: int, p: float, q: float) -> float:
    """Log-probability of ``searches`` ~ Bin(n, p) and ``hits`` ~ Bin(searches, q)."""
    if not (0 <= hits <= searches <= n):
        raise ValueError("counts must satisfy 0 <= hits <= searches <= n")
    if n == 0:
        return 0.0

    def term(k, m, r):
        if (r == 0.0 and k > 0) or (r == 1.0 and k < m):
            return -math.inf
        out = _lchoose(m, k)
        if k > 0:
            out += k * math.log(r)
        if m - k > 0:
            out += (m - k) * math.log1p(-r)
        return out

    ll = term(searches, n, p)
    if searches > 0:
        ll += term(hits, searches, q)
    return ll


def log_likelihood(counts: CountsTable, params: ModelParams) -> float:
    """Binomial sufficient-statistics log-likelihood of ``counts``.

    Returns ``-inf`` (and logs a warning) when some cell probability is
    exactly 0 or 1 while its count is interior.
    """
    if counts.is_empty():
        return 0.0
    eta_phi = (params.phi_r[:, None] + params.phi_d[None, :]).ravel()
    eta_lam = (params.lambda_r[:, None] + params.lambda_d[None, :]).ravel()
    lt = _logit(params.t).ravel()
    k = eta_phi.size
    scratch = [np.empty(k) for _ in range(3)]
    with np.errstate(all="ignore"):
        ll = _cells_loglik(
            eta_phi, eta_lam, lt, counts.n.ravel(), counts.searches.ravel(), counts.hits.ravel(), False, *scratch
        )
    if not math.isfinite(ll):
        logger.warning("log-likelihood is -inf: a cell probability saturated at 0 or 1")
        return -math.inf
    return float(ll)


def _normal_logpdf(x, loc, scale):
    x = np.asarray(x, dtype=float)
    return np.sum(-0.5 * ((x - loc) / scale) ** 2 - np.log(scale) - _LOG_SQRT_2PI)


def log_prior(params: ModelParams) -> float:
    """Log prior density of constrained parameters (no Jacobian terms).

    N(0, 2) on group effects and hyper-locations, half-N(0, 2) on scales,
    N(mu, sigma) on non-reference department effects, and a normal prior on
    each logit-threshold around its group's mean.
    """
    ref = params.ref
    others = np.arange(params.n_depts) != ref
    lp = 0.0
    lp += _normal_logpdf(params.phi_r, 0.0, PRIOR_SD)
    lp += _normal_logpdf(params.lambda_r, 0.0, PRIOR_SD)
    lp += _normal_logpdf([params.mu_phi, params.mu_lambda], 0.0, PRIOR_SD)
    lp += _normal_logpdf(params.mu_t, 0.0, PRIOR_SD)
    scales = np.concatenate([[params.sigma_phi, params.sigma_lambda], params.sigma_t])
    lp += _normal_logpdf(scales, 0.0, PRIOR_SD) + scales.size * math.log(2.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp += _normal_logpdf(params.phi_d[others], params.mu_phi, params.sigma_phi)
        lp += _normal_logpdf(params.lambda_d[others], params.mu_lambda, params.sigma_lambda)
        lp += _normal_logpdf(_logit(params.t), params.mu_t[:, None], params.sigma_t[:, None])
    return float(lp)


# ---------------------------------------------------------------------------
# unconstrained parameterization

CENTERED = "centered"
NONCENTERED = "noncentered"
AUTO = "auto"
# median searches per cell above which the data pin each cell down well
# enough that the centered layout avoids the hierarchical funnel
AUTO_MIN_SEARCHES = 200


def choose_parameterization(counts: "CountsTable") -> str:
    """Centered for data-rich tables, non-centered when cells are sparse."""
    s = counts.searches[counts.n > 0]
    if s.size and float(np.median(s)) >= AUTO_MIN_SEARCHES:
        return CENTERED
    return NONCENTERED


def _hier_forward(u, mu, s, centered):
    """Map raw block values to effects: identity (centered) or mu + s*u."""
    return u if centered else mu + s * u


def _hier_logp(u, x, gx, mu, s, ls, centered):
    """Log density of a hierarchical block over its raw coordinates.

    ``gx`` is the likelihood gradient w.r.t. the effects ``x``.  Returns the
    log density (prior plus transform Jacobian) and per-element gradient
    contributions w.r.t. the raw values, the location and the log-scale;
    the caller reduces the last two over the block.
    """
    if centered:
        z = (x - mu) / s
        lp = np.sum(-0.5 * z * z - ls) - z.size * _LOG_SQRT_2PI
        return lp, gx - z / s, z / s, z * z - 1.0
    lp = -0.5 * np.sum(u * u) - u.size * _LOG_SQRT_2PI
    return lp, gx * s - u, gx, gx * s * u


@numba.njit(cache=True, error_model="numpy")
def _hier_block(u, x, gx, mu, s, ls, centered, gu):
    """Scalar-location block: returns (logp, d/dmu, d/dlog s); fills ``gu``."""
    lp = 0.0
    gmu = 0.0
    gls = 0.0
    for i in range(u.shape[0]):
        if centered:
            z = (x[i] - mu) / s
            lp += -0.5 * z * z - ls - _LOG_SQRT_2PI
            gu[i] = gx[i] - z / s
            gmu += z / s
            gls += z * z - 1.0
        else:
            lp += -0.5 * u[i] * u[i] - _LOG_SQRT_2PI
            gu[i] = gx[i] * s - u[i]
            gmu += gx[i]
            gls += gx[i] * s * u[i]
    return lp, gmu, gls


@numba.njit(cache=True, error_model="numpy")
def _density_kernel(v, R, D, nonref, n, S, H, centered, grad, g_phi, g_lam, g_t):
    """Log posterior on the unconstrained vector, laid out as in :class:`ThresholdModel`."""
    var = PRIOR_SD * PRIOR_SD
    nd = D - 1
    o_lr = R
    o_h = 2 * R
    o_pd = o_h + 4
    o_ld = o_pd + nd
    o_mt = o_ld + nd
    o_st = o_mt + R
    o_t = o_st + R
    for i in range(grad.shape[0]):
        grad[i] = 0.0
    mu_phi = v[o_h]
    ls_phi = v[o_h + 1]
    mu_lam = v[o_h + 2]
    ls_lam = v[o_h + 3]
    s_phi = math.exp(ls_phi)
    s_lam = math.exp(ls_lam)

    phi_d = np.zeros(D)
    lam_d = np.zeros(D)
    for k in range(nd):
        j = nonref[k]
        if centered:
            phi_d[j] = v[o_pd + k]
            lam_d[j] = v[o_ld + k]
        else:
            phi_d[j] = mu_phi + s_phi * v[o_pd + k]
            lam_d[j] = mu_lam + s_lam * v[o_ld + k]
    K = R * D
    eta_phi = np.empty(K)
    eta_lam = np.empty(K)
    x_t = np.empty(K)
    for r in range(R):
        s_t = math.exp(v[o_st + r])
        for j in range(D):
            i = r * D + j
            eta_phi[i] = v[r] + phi_d[j]
            eta_lam[i] = v[o_lr + r] + lam_d[j]
            if centered:
                x_t[i] = v[o_t + i]
            else:
                x_t[i] = v[o_mt + r] + s_t * v[o_t + i]
    lp = _cells_loglik(eta_phi, eta_lam, x_t, n, S, H, True, g_phi, g_lam, g_t)

    # group effects
    col_phi = np.zeros(D)
    col_lam = np.zeros(D)
    for r in range(R):
        a = 0.0
        b = 0.0
        for j in range(D):
            a += g_phi[r * D + j]
            b += g_lam[r * D + j]
            col_phi[j] += g_phi[r * D + j]
            col_lam[j] += g_lam[r * D + j]
        grad[r] = a - v[r] / var
        grad[o_lr + r] = b - v[o_lr + r] / var

    # department blocks
    gx = np.empty(nd)
    gu = np.empty(nd)
    xs = np.empty(nd)
    for k in range(nd):
        gx[k] = col_phi[nonref[k]]
        xs[k] = phi_d[nonref[k]]
    lpb, gmu, gls = _hier_block(v[o_pd:o_pd + nd], xs, gx, mu_phi, s_phi, ls_phi, centered, gu)
    lp += lpb
    grad[o_pd:o_pd + nd] = gu
    grad[o_h] = gmu - mu_phi / var
    grad[o_h + 1] = gls + 1.0 - s_phi * s_phi / var
    for k in range(nd):
        gx[k] = col_lam[nonref[k]]
        xs[k] = lam_d[nonref[k]]
    lpb, gmu, gls = _hier_block(v[o_ld:o_ld + nd], xs, gx, mu_lam, s_lam, ls_lam, centered, gu)
    lp += lpb
    grad[o_ld:o_ld + nd] = gu
    grad[o_h + 2] = gmu - mu_lam / var
    grad[o_h + 3] = gls + 1.0 - s_lam * s_lam / var

    # per-group threshold blocks
    gut = np.empty(D)
    for r in range(R):
        mu_t = v[o_mt + r]
        ls_t = v[o_st + r]
        s_t = math.exp(ls_t)
        lo = r * D
        lpb, gmu, gls = _hier_block(
            v[o_t + lo:o_t + lo + D], x_t[lo:lo + D], g_t[lo:lo + D], mu_t, s_t, ls_t, centered, gut
        )
        lp += lpb
        grad[o_t + lo:o_t + lo + D] = gut
        grad[o_mt + r] = gmu - mu_t / var
        grad[o_st + r] = gls + 1.0 - s_t * s_t / var
        lp += -0.5 * mu_t * mu_t / var - 0.5 * s_t * s_t / var + ls_t

    # remaining N(0, 2) locations and half-N(0, 2) scales on the log scale
    for r in range(R):
        lp += -0.5 * (v[r] * v[r] + v[o_lr + r] * v[o_lr + r]) / var
    lp += -0.5 * (mu_phi * mu_phi + mu_lam * mu_lam) / var
    lp += -0.5 * (s_phi * s_phi + s_lam * s_lam) / var + ls_phi + ls_lam
    n_loc = 3 * R + 2
    n_scale = R + 2
    lp -= n_loc * (math.log(PRIOR_SD) + _LOG_SQRT_2PI)
    lp += n_scale * (math.log(2.0) - math.log(PRIOR_SD) - _LOG_SQRT_2PI)
    return lp


@dataclass
class ThresholdModel:
    """Posterior target for one counts table.

    Instances are callable as ``model(v) -> (log_density, gradient)`` and are
    picklable, so chains can evaluate them in worker processes.

    ``parameterization`` selects how department effects and logit-thresholds
    enter the unconstrained vector: ``"noncentered"`` stores standardized
    offsets, ``"centered"`` stores the effects themselves.  Both define the
    same posterior over :class:`ModelParams`.  ``"auto"`` picks one from
    the counts via :func:`choose_parameterization`.
    """

    counts: CountsTable
    ref: int | None = None
    parameterization: str = CENTERED

    def __post_init__(self):
        if self.counts.is_empty():
            raise ValueError("cannot build a model on an empty counts table")
        if self.parameterization == AUTO:
            self.parameterization = choose_parameterization(self.counts)
        if self.parameterization not in (CENTERED, NONCENTERED):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        if self.ref is None:
            self.ref = self.counts.reference_dept()
        self._centered = self.parameterization == CENTERED
        R, D = self.counts.shape
        self.R, self.D = R, D
        self._nonref = np.array([j for j in range(D) if j != self.ref], dtype=np.int64)
        self._n = self.counts.n.ravel().copy()
        self._S = self.counts.searches.ravel().copy()
        self._H = self.counts.hits.ravel().copy()
        o = 0
        self._sl = {}
        for name, size in (
            ("phi_r", R),
            ("lambda_r", R),
            ("hyper", 4),
            ("phi_d", D - 1),
            ("lambda_d", D - 1),
            ("mu_t", R),
            ("log_sigma_t", R),
            ("t", R * D),
        ):
            self._sl[name] = slice(o, o + size)
            o += size
        self.dim = o
        self._scratch = [np.empty(R * D) for _ in range(3)]

    def __getstate__(self):
        state = self.__dict__.copy()
        state.pop("_scratch", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._scratch = [np.empty(self.R * self.D) for _ in range(3)]

    # -- names ------------------------------------------------------------
    def param_names(self) -> list[str]:
        """Names of the constrained quantities written to draws files."""
        g, d = self.counts.groups, self.counts.depts
        names = [f"phi_r[{x}]" for x in g] + [f"lambda_r[{x}]" for x in g]
        names += [f"phi_d[{x}]" for x in d] + [f"lambda_d[{x}]" for x in d]
        names += ["mu_phi", "sigma_phi", "mu_lambda", "sigma_lambda"]
        names += [f"mu_t[{x}]" for x in g] + [f"sigma_t[{x}]" for x in g]
        names += [f"t[{x},{y}]" for x in g for y in d]
        return names

    def unconstrained_names(self) -> list[str]:
        g, d = self.counts.groups, self.counts.depts
        nd = [d[j] for j in self._nonref]
        pre = "" if self._centered else "z_"
        names = [f"phi_r[{x}]" for x in g] + [f"lambda_r[{x}]" for x in g]
        names += ["mu_phi", "log_sigma_phi", "mu_lambda", "log_sigma_lambda"]
        names += [f"{pre}phi_d[{x}]" for x in nd] + [f"{pre}lambda_d[{x}]" for x in nd]
        names += [f"mu_t[{x}]" for x in g] + [f"log_sigma_t[{x}]" for x in g]
        names += [f"{'logit_t' if self._centered else 'z_t'}[{x},{y}]" for x in g for y in d]
        return names

    # -- transforms -------------------------------------------------------
    def constrain(self, v) -> ModelParams:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}, got {v.shape}")
        sl, c = self._sl, self._centered
        mu_phi, ls_phi, mu_lam, ls_lam = v[sl["hyper"]]
        s_phi, s_lam = math.exp(ls_phi), math.exp(ls_lam)
        phi_d = np.zeros(self.D)
        lam_d = np.zeros(self.D)
        phi_d[self._nonref] = _hier_forward(v[sl["phi_d"]], mu_phi, s_phi, c)
        lam_d[self._nonref] = _hier_forward(v[sl["lambda_d"]], mu_lam, s_lam, c)
        mu_t = v[sl["mu_t"]].copy()
        sigma_t = np.exp(v[sl["log_sigma_t"]])
        u_t = v[sl["t"]].reshape(self.R, self.D)
        t = _expit(_hier_forward(u_t, mu_t[:, None], sigma_t[:, None], c))
        return ModelParams(
            phi_r=v[sl["phi_r"]],
            lambda_r=v[sl["lambda_r"]],
            phi_d=phi_d,
            lambda_d=lam_d,
            t=np.asarray(t).reshape(self.R, self.D),
            mu_phi=float(mu_phi),
            sigma_phi=s_phi,
            mu_lambda=float(mu_lam),
            sigma_lambda=s_lam,
            mu_t=mu_t,
            sigma_t=sigma_t,
            ref=self.ref,
        )

    def unconstrain(self, p: ModelParams) -> np.ndarray:
        if p.ref != self.ref:
            raise ValueError("reference department mismatch")
        p.validate()
        sl = self._sl
        v = np.empty(self.dim)
        v[sl["phi_r"]] = p.phi_r
        v[sl["lambda_r"]] = p.lambda_r
        v[sl["hyper"]] = [p.mu_phi, math.log(p.sigma_phi), p.mu_lambda, math.log(p.sigma_lambda)]
        lt = _logit(p.t)
        if self._centered:
            v[sl["phi_d"]] = p.phi_d[self._nonref]
            v[sl["lambda_d"]] = p.lambda_d[self._nonref]
            v[sl["t"]] = lt.ravel()
        else:
            v[sl["phi_d"]] = (p.phi_d[self._nonref] - p.mu_phi) / p.sigma_phi
            v[sl["lambda_d"]] = (p.lambda_d[self._nonref] - p.mu_lambda) / p.sigma_lambda
            v[sl["t"]] = ((lt - p.mu_t[:, None]) / p.sigma_t[:, None]).ravel()
        v[sl["mu_t"]] = p.mu_t
        v[sl["log_sigma_t"]] = np.log(p.sigma_t)
        return v

    def constrained_vector(self, v) -> np.ndarray:
        """Flatten constrained values in :meth:`param_names` order."""
        p = self.constrain(v)
        return np.concatenate(
            [
                p.phi_r,
                p.lambda_r,
                p.phi_d,
                p.lambda_d,
                [p.mu_phi, p.sigma_phi, p.mu_lambda, p.sigma_lambda],
                p.mu_t,
                p.sigma_t,
                p.t.ravel(),
            ]
        )

    def params_from_vector(self, x) -> ModelParams:
        """Inverse of :meth:`constrained_vector`."""
        x = np.asarray(x, dtype=float)
        R, D = self.R, self.D
        cuts = np.cumsum([R, R, D, D, 4, R, R])
        phi_r, lam_r, phi_d, lam_d, hyper, mu_t, sigma_t, t = np.split(x, cuts)
        return ModelParams(
            phi_r=phi_r,
            lambda_r=lam_r,
            phi_d=phi_d,
            lambda_d=lam_d,
            t=t.reshape(R, D),
            mu_phi=float(hyper[0]),
            sigma_phi=float(hyper[1]),
            mu_lambda=float(hyper[2]),
            sigma_lambda=float(hyper[3]),
            mu_t=mu_t,
            sigma_t=sigma_t,
            ref=self.ref,
        )

    def log_jacobian(self, v) -> float:
        """Log-determinant of the map from ``v`` to (scales, department effects, logit-thresholds)."""
        v = np.asarray(v, dtype=float)
        sl = self._sl
        _, ls_phi, _, ls_lam = v[sl["hyper"]]
        ls_t = v[sl["log_sigma_t"]]
        if self._centered:
            return float(ls_phi + ls_lam + np.sum(ls_t))
        nd = self.D - 1
        return float(ls_phi * (1 + nd) + ls_lam * (1 + nd) + np.sum(ls_t) * (1 + self.D))

    # -- density ------------------------------------------------------------
    def log_density(self, v) -> float:
        return self.log_density_grad(v)[0]

    def __call__(self, v):
        return self.log_density_grad(v)

    def log_density_grad(self, v) -> tuple[float, np.ndarray]:
        """Log posterior over the unconstrained space and its gradient.

        Overflowing regions return ``-1e300`` with a zero gradient.
        """
        v = np.asarray(v, dtype=float)
        with np.errstate(all="ignore"):
            lp, grad = self._log_density_grad(v)
        if not math.isfinite(lp) or not np.all(np.isfinite(grad)):
            return -1e300, np.zeros(self.dim)
        return lp, grad

    def _log_density_grad(self, v):
        grad = np.empty(self.dim)
        g_phi, g_lam, g_t = self._scratch
        lp = _density_kernel(
            v, self.R, self.D, self._nonref, self._n, self._S, self._H, self._centered, grad, g_phi, g_lam, g_t
        )
        return float(lp), grad

    def _log_density_grad_numpy(self, v):
        # vectorized reference implementation of the compiled kernel
        sl, c = self._sl, self._centered
        R, D = self.R, self.D
        grad = np.zeros(self.dim)
        var = PRIOR_SD**2

        phi_r = v[sl["phi_r"]]
        lam_r = v[sl["lambda_r"]]
        mu_phi, ls_phi, mu_lam, ls_lam = v[sl["hyper"]]
        s_phi, s_lam = np.exp(ls_phi), np.exp(ls_lam)
        u_phi = v[sl["phi_d"]]
        u_lam = v[sl["lambda_d"]]
        mu_t = v[sl["mu_t"]]
        ls_t = v[sl["log_sigma_t"]]
        s_t = np.exp(ls_t)
        u_t = v[sl["t"]].reshape(R, D)

        x_phi = _hier_forward(u_phi, mu_phi, s_phi, c)
        x_lam = _hier_forward(u_lam, mu_lam, s_lam, c)
        x_t = _hier_forward(u_t, mu_t[:, None], s_t[:, None], c)
        phi_d = np.zeros(D)
        lam_d = np.zeros(D)
        phi_d[self._nonref] = x_phi
        lam_d[self._nonref] = x_lam
        eta_phi = (phi_r[:, None] + phi_d[None, :]).ravel()
        eta_lam = (lam_r[:, None] + lam_d[None, :]).ravel()

        g_phi, g_lam, g_t = self._scratch
        ll = _cells_loglik(eta_phi, eta_lam, x_t.ravel(), self._n, self._S, self._H, True, g_phi, g_lam, g_t)
        g_phi = g_phi.reshape(R, D)
        g_lam = g_lam.reshape(R, D)
        g_t = g_t.reshape(R, D)

        lp = ll
        grad[sl["phi_r"]] = g_phi.sum(axis=1) - phi_r / var
        grad[sl["lambda_r"]] = g_lam.sum(axis=1) - lam_r / var

        # hierarchical blocks (prior + Jacobian of the block transform)
        lp_b, gu, gmu, gls = _hier_logp(u_phi, x_phi, g_phi.sum(axis=0)[self._nonref], mu_phi, s_phi, ls_phi, c)
        lp += lp_b
        grad[sl["phi_d"]] = gu
        g_hyper = [gmu.sum(), gls.sum(), 0.0, 0.0]
        lp_b, gu, gmu, gls = _hier_logp(u_lam, x_lam, g_lam.sum(axis=0)[self._nonref], mu_lam, s_lam, ls_lam, c)
        lp += lp_b
        grad[sl["lambda_d"]] = gu
        g_hyper[2], g_hyper[3] = gmu.sum(), gls.sum()
        lp_b, gu, gmu, gls = _hier_logp(u_t, x_t, g_t, mu_t[:, None], s_t[:, None], ls_t[:, None], c)
        lp += lp_b
        grad[sl["t"]] = gu.ravel()
        grad[sl["mu_t"]] = gmu.sum(axis=1) - mu_t / var
        grad[sl["log_sigma_t"]] = gls.sum(axis=1) + 1.0 - s_t**2 / var

        # N(0, 2) on group effects and hyper-locations
        locs = np.concatenate([phi_r, lam_r, [mu_phi, mu_lam], mu_t])
        lp += -0.5 * np.dot(locs, locs) / var - locs.size * (math.log(PRIOR_SD) + _LOG_SQRT_2PI)
        g_hyper[0] -= mu_phi / var
        g_hyper[2] -= mu_lam / var

        # half-N(0, 2) on scales, sampled on the log scale
        scales = np.concatenate([[s_phi, s_lam], s_t])
        log_scales = np.concatenate([[ls_phi, ls_lam], ls_t])
        lp += np.sum(-0.5 * scales**2 / var + log_scales) + scales.size * (
            math.log(2.0) - math.log(PRIOR_SD) - _LOG_SQRT_2PI
        )
        g_hyper[1] += 1.0 - s_phi**2 / var
        g_hyper[3] += 1.0 - s_lam**2 / var
        grad[sl["hyper"]] = g_hyper
        return float(lp), grad


def log_posterior_grad(v, counts: CountsTable, parameterization: str = CENTERED) -> tuple[float, np.ndarray]:
    """Convenience wrapper: log posterior and gradient at ``v`` for ``counts``."""
    return ThresholdModel(counts, parameterization=parameterization)(v)
