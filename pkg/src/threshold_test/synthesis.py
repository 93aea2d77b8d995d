"""Synthetic data, posterior predictive checks and recovery evaluation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np
from scipy import optimize

from .data import SearchBasis, StopRecord
from .model import CountsTable, ModelParams, ThresholdModel, _expit, _logit, _rates, cell_rates
from .sampler import PosteriorDraws

NOISE_SWEEP = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05)
_EPOCH = datetime(2009, 1, 1)
_SPAN_SECONDS = int((datetime(2015, 1, 1) - _EPOCH).total_seconds())


@dataclass
class SynthSpec:
    """Ground truth and design for a synthetic data set.

    ``threshold_noise_sigma`` is the standard deviation of stop-level
    threshold jitter around ``t_rd``; 0 reproduces the fitted model exactly.
    """

    params: ModelParams
    n: np.ndarray
    threshold_noise_sigma: float = 0.0
    seed: int = 0
    groups: list[str] | None = None
    depts: list[str] | None = None

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.int64)
        R, D = self.params.n_groups, self.params.n_depts
        if self.n.shape != (R, D):
            raise ValueError(f"n must have shape {(R, D)}")
        if self.threshold_noise_sigma < 0:
            raise ValueError("threshold_noise_sigma must be >= 0")
        if self.threshold_noise_sigma > 0.05:
            warnings.warn("threshold noise above 0.05 is outside the studied range", stacklevel=2)
        self.groups = list(self.groups) if self.groups else [f"g{i}" for i in range(R)]
        self.depts = list(self.depts) if self.depts else [f"d{j:02d}" for j in range(D)]


def generate(spec: SynthSpec, records: bool = False):
    """Simulate stops cell by cell and aggregate.

    Each stop draws a signal from the cell's beta distribution and a
    threshold from N(t_rd, sigma) clipped to [0, 1]; it is searched when the
    signal reaches the threshold and a search finds contraband with
    probability equal to the signal.

    Returns the :class:`CountsTable`, or ``(counts, list_of_StopRecord)``
    when ``records`` is true.
    """
    rng = np.random.default_rng(spec.seed)
    p = spec.params
    phi = p.cell_phi()
    lam = p.cell_lambda()
    R, D = spec.n.shape
    S = np.zeros((R, D), dtype=np.int64)
    H = np.zeros((R, D), dtype=np.int64)
    out_records = [] if records else None
    for i in range(R):
        for j in range(D):
            n = int(spec.n[i, j])
            if n == 0:
                continue
            signal = rng.beta(phi[i, j] * lam[i, j], (1.0 - phi[i, j]) * lam[i, j], size=n)
            if spec.threshold_noise_sigma > 0:
                thr = np.clip(rng.normal(p.t[i, j], spec.threshold_noise_sigma, size=n), 0.0, 1.0)
            else:
                thr = p.t[i, j]
            searched = signal >= thr
            hit = searched & (rng.random(n) < signal)
            S[i, j] = searched.sum()
            H[i, j] = hit.sum()
            if records:
                out_records.extend(_emit(rng, spec.groups[i], spec.depts[j], searched, hit))
    counts = CountsTable(spec.groups, spec.depts, spec.n, S, H)
    return (counts, out_records) if records else counts


def _emit(rng, group, dept, searched, hit):
    secs = rng.integers(0, _SPAN_SECONDS, size=searched.size)
    ages = rng.integers(16, 80, size=searched.size)
    genders = rng.random(searched.size) < 0.5
    for s, h, sec, age, gm in zip(searched, hit, secs, ages, genders):
        yield StopRecord(
            group=group,
            dept=dept,
            searched=bool(s),
            hit=bool(h),
            search_basis=SearchBasis.PROBABLE_CAUSE if s else SearchBasis.NONE,
            timestamp=_EPOCH + timedelta(seconds=int(sec)),
            driver_age=float(age),
            driver_gender="male" if gm else "female",
        )


def recovery_truth(
    group_thresholds=(0.15, 0.15, 0.07, 0.07),
    n_depts: int = 20,
    dept_weights=None,
    ref: int = 0,
    seed: int = 0,
) -> ModelParams:
    """Ground truth for recovery experiments.

    Thresholds vary by department around each group's level and are then
    shifted on the logit scale so the stop-weighted group average equals
    ``group_thresholds`` exactly.  ``dept_weights`` defaults to equal weights.
    """
    rng = np.random.default_rng(seed)
    R = len(group_thresholds)
    w = np.ones(n_depts) if dept_weights is None else np.asarray(dept_weights, dtype=float)
    w = w / w.sum()
    phi_r = rng.normal(-2.2, 0.25, R)
    lambda_r = np.log(rng.uniform(5.0, 10.0, R))
    phi_d = rng.normal(0.0, 0.4, n_depts)
    lambda_d = rng.normal(0.0, 0.3, n_depts)
    phi_d[ref] = 0.0
    lambda_d[ref] = 0.0
    t = np.empty((R, n_depts))
    for r, target in enumerate(group_thresholds):
        base = _logit(target) + rng.normal(0.0, 0.3, n_depts)
        shift = optimize.brentq(lambda s: float(w @ _expit(base + s)) - target, -5.0, 5.0, xtol=1e-14)
        t[r] = _expit(base + shift)
    lt = _logit(t)
    others = np.arange(n_depts) != ref
    return ModelParams(
        phi_r=phi_r,
        lambda_r=lambda_r,
        phi_d=phi_d,
        lambda_d=lambda_d,
        t=t,
        mu_phi=float(phi_d[others].mean()) if others.any() else 0.0,
        sigma_phi=float(phi_d[others].std()) if others.sum() > 1 else 1.0,
        mu_lambda=float(lambda_d[others].mean()) if others.any() else 0.0,
        sigma_lambda=float(lambda_d[others].std()) if others.sum() > 1 else 1.0,
        mu_t=lt.mean(axis=1),
        sigma_t=lt.std(axis=1) if n_depts > 1 else np.ones(R),
        ref=ref,
    )


# ---------------------------------------------------------------------------
# posterior predictive checks


@dataclass
class PpcReport:
    """Observed vs. posterior-averaged cell rates.

    Hit-rate entries are NaN for cells without searches; those cells are
    left out of the hit-rate RMSE.
    """

    groups: list[str]
    depts: list[str]
    n: np.ndarray
    observed_search: np.ndarray
    observed_hit: np.ndarray
    predicted_search: np.ndarray
    predicted_hit: np.ndarray

    @property
    def search_residual(self) -> np.ndarray:
        return self.observed_search - self.predicted_search

    @property
    def hit_residual(self) -> np.ndarray:
        return self.observed_hit - self.predicted_hit

    @property
    def search_rmse(self) -> float:
        m = self.n > 0
        return _weighted_rmse(self.search_residual[m], self.n[m])

    @property
    def hit_rmse(self) -> float:
        m = np.isfinite(self.observed_hit)
        return _weighted_rmse(self.hit_residual[m], self.n[m])

    @property
    def mean_weighted_search_residual(self) -> float:
        m = self.n > 0
        return float(np.average(self.search_residual[m], weights=self.n[m]))

    def rows(self):
        for i, g in enumerate(self.groups):
            for j, d in enumerate(self.depts):
                yield {
                    "group": g,
                    "dept": d,
                    "n": int(self.n[i, j]),
                    "observed_search_rate": self.observed_search[i, j],
                    "predicted_search_rate": self.predicted_search[i, j],
                    "search_residual": self.search_residual[i, j],
                    "observed_hit_rate": self.observed_hit[i, j],
                    "predicted_hit_rate": self.predicted_hit[i, j],
                    "hit_residual": self.hit_residual[i, j],
                }


def _weighted_rmse(resid, weights) -> float:
    if resid.size == 0 or weights.sum() == 0:
        return math.nan
    return float(math.sqrt(np.sum(weights * resid**2) / np.sum(weights)))


def posterior_predictive(draws: PosteriorDraws, model: ThresholdModel) -> PpcReport:
    """Average the analytic search and hit rates over every posterior draw."""
    counts = model.counts
    R, D = model.R, model.D
    ps = np.zeros(R * D)
    qs = np.zeros(R * D)
    m = 0
    for v in draws.draws.reshape(-1, draws.draws.shape[2]):
        p = model.constrain(v)
        eta_phi = (p.phi_r[:, None] + p.phi_d[None, :]).ravel()
        eta_lam = (p.lambda_r[:, None] + p.lambda_d[None, :]).ravel()
        sp, hq = _rates(eta_phi, eta_lam, _logit(p.t).ravel())
        ps += sp
        qs += hq
        m += 1
    return _ppc_report(counts, (ps / m).reshape(R, D), (qs / m).reshape(R, D))


def ppc_at(params: ModelParams, counts: CountsTable) -> PpcReport:
    """PPC report for a single parameter setting (e.g. the generating truth)."""
    p, q = cell_rates(params)
    return _ppc_report(counts, p, q)


def _ppc_report(counts, pred_s, pred_h):
    n = counts.n.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        obs_s = np.where(n > 0, counts.searches / np.where(n > 0, n, 1), np.nan)
        obs_h = np.where(counts.searches > 0, counts.hits / np.where(counts.searches > 0, counts.searches, 1), np.nan)
    pred_h = np.where(counts.searches > 0, pred_h, np.nan)
    return PpcReport(list(counts.groups), list(counts.depts), counts.n, obs_s, obs_h, pred_s, pred_h)


# ---------------------------------------------------------------------------
# threshold summaries and recovery


def aggregate_thresholds(t_draws: np.ndarray, dept_stops, groups=None) -> dict[str, dict[str, float]]:
    """Stop-weighted average threshold per group, summarized over draws.

    ``t_draws`` has shape ``(n_draws, R, D)``; weights are department stop
    counts.  The average is formed per draw before summarizing.
    """
    t_draws = np.asarray(t_draws, dtype=float)
    if t_draws.ndim == 2:
        t_draws = t_draws[None]
    w = np.asarray(dept_stops, dtype=float)
    agg = t_draws @ w / w.sum()
    groups = groups or [f"g{i}" for i in range(agg.shape[1])]
    lo, hi = np.quantile(agg, [0.025, 0.975], axis=0)
    return {
        g: {"mean": float(agg[:, i].mean()), "q2.5": float(lo[i]), "q97.5": float(hi[i])}
        for i, g in enumerate(groups)
    }


def aggregate_threshold_draws(t_draws: np.ndarray, dept_stops) -> np.ndarray:
    w = np.asarray(dept_stops, dtype=float)
    return np.asarray(t_draws) @ w / w.sum()


@dataclass
class RecoveryReport:
    rows: list[dict]

    @property
    def coverage(self) -> float:
        return float(np.mean([r["covered"] for r in self.rows])) if self.rows else math.nan

    def max_abs_error(self, min_expected_searches: float = 0.0) -> float:
        errs = [r["abs_error"] for r in self.rows if r["expected_searches"] >= min_expected_searches]
        return max(errs) if errs else math.nan


def recovery_report(truth: ModelParams, t_draws: np.ndarray, counts: CountsTable | None = None) -> RecoveryReport:
    """Posterior-mean error and 95% coverage of each true threshold."""
    t_draws = np.asarray(t_draws, dtype=float)
    mean = t_draws.mean(axis=0)
    lo, hi = np.quantile(t_draws, [0.025, 0.975], axis=0)
    R, D = truth.t.shape
    groups = counts.groups if counts is not None else [f"g{i}" for i in range(R)]
    depts = counts.depts if counts is not None else [f"d{j:02d}" for j in range(D)]
    expected = np.zeros((R, D))
    if counts is not None:
        expected = counts.n * cell_rates(truth)[0]
    rows = []
    for i in range(R):
        for j in range(D):
            true = truth.t[i, j]
            rows.append(
                {
                    "group": groups[i],
                    "dept": depts[j],
                    "true": float(true),
                    "mean": float(mean[i, j]),
                    "q2.5": float(lo[i, j]),
                    "q97.5": float(hi[i, j]),
                    "abs_error": float(abs(mean[i, j] - true)),
                    "covered": bool(lo[i, j] <= true <= hi[i, j]),
                    "expected_searches": float(expected[i, j]),
                }
            )
    return RecoveryReport(rows)
