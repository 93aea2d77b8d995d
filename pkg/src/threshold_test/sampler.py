"""No-U-Turn Hamiltonian Monte Carlo with windowed adaptation, plus diagnostics.

The transition is the multinomial variant: trajectories double until the
generalized no-U-turn criterion fires (checked across the whole tree and
across merged sub-trees), and the new state is drawn from the trajectory with
weights ``exp(-H)``, biased towards the newest half at the top level.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0
RHAT_THRESHOLD = 1.05


class SamplerInitError(RuntimeError):
    """No starting point with finite log density was found."""


@dataclass
class SamplerConfig:
    chains: int = 5
    warmup_iters: int = 2500
    sampling_iters: int = 2500
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    threads: int = 1
    init_scale: float = 0.1

    def __post_init__(self):
        if self.chains < 1 or self.sampling_iters < 1 or self.warmup_iters < 0:
            raise ValueError("chains and sampling_iters must be >= 1, warmup_iters >= 0")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")


@dataclass
class PosteriorDraws:
    """Post-warmup draws, shape ``(chains, iters, dim)`` on the unconstrained scale.

    ``constrained`` (``(chains, iters, k)``) and ``names`` describe the
    quantities reported to users; for a plain target they equal the raw draws.
    """

    draws: np.ndarray
    log_density: np.ndarray
    divergences: np.ndarray
    step_sizes: np.ndarray
    inv_metric: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    names: list[str] = field(default_factory=list)
    constrained: np.ndarray | None = None

    def __post_init__(self):
        if self.constrained is None:
            self.constrained = self.draws
        if not self.names:
            self.names = [f"x[{i}]" for i in range(self.constrained.shape[2])]
        if len(self.names) != self.constrained.shape[2]:
            raise ValueError("names do not match constrained draws")

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iters(self) -> int:
        return self.draws.shape[1]

    def pooled(self) -> np.ndarray:
        """Constrained draws with chains concatenated, ``(chains*iters, k)``."""
        c = self.constrained
        return c.reshape(-1, c.shape[2])

    def column(self, name: str) -> np.ndarray:
        return self.constrained[:, :, self.names.index(name)]


@dataclass
class DiagnosticsReport:
    names: list[str]
    rhat: np.ndarray
    ess_bulk: np.ndarray
    divergences: int

    def max_rhat(self) -> float:
        """Largest R-hat, ignoring NaN entries (parameters constant across all draws)."""
        r = self.rhat[~np.isnan(self.rhat)]
        if r.size == 0:
            return math.nan
        return float(r.max())

    def converged(self, threshold: float = RHAT_THRESHOLD) -> bool:
        """All assessable R-hats below ``threshold``; False when none can be assessed."""
        m = self.max_rhat()
        return bool(m < threshold)


# ---------------------------------------------------------------------------
# NUTS transition


@dataclass
class _Tree:
    q_minus: np.ndarray
    p_minus: np.ndarray
    g_minus: np.ndarray
    q_plus: np.ndarray
    p_plus: np.ndarray
    g_plus: np.ndarray
    q_prop: np.ndarray
    lp_prop: float
    g_prop: np.ndarray
    rho: np.ndarray
    log_weight: float
    sum_accept: float
    n_leapfrog: int
    valid: bool = True
    divergent: bool = False


class _Integrator:
    def __init__(self, target, inv_metric):
        self.target = target
        self.inv_metric = inv_metric

    def kinetic(self, p):
        return 0.5 * float(np.dot(p, self.inv_metric * p))

    def leapfrog(self, q, p, g, eps):
        p = p + 0.5 * eps * g
        q = q + eps * self.inv_metric * p
        lp, g = self.target(q)
        p = p + 0.5 * eps * g
        return q, p, lp, g


def _no_u_turn(p_sharp_minus, p_sharp_plus, rho):
    return float(np.dot(p_sharp_minus, rho)) > 0 and float(np.dot(p_sharp_plus, rho)) > 0


def _build_tree(integ, q, p, g, direction, depth, eps, H0, rng):
    if depth == 0:
        q1, p1, lp1, g1 = integ.leapfrog(q, p, g, direction * eps)
        H = -lp1 + integ.kinetic(p1)
        if not math.isfinite(H):
            H = math.inf
        delta = H0 - H
        divergent = -delta > DIVERGENCE_THRESHOLD
        accept = 1.0 if delta > 0 else math.exp(delta)
        return _Tree(q1, p1, g1, q1, p1, g1, q1, lp1, g1, p1.copy(), delta, accept, 1, not divergent, divergent)

    first = _build_tree(integ, q, p, g, direction, depth - 1, eps, H0, rng)
    if not first.valid:
        return first
    if direction > 0:
        second = _build_tree(integ, first.q_plus, first.p_plus, first.g_plus, direction, depth - 1, eps, H0, rng)
    else:
        second = _build_tree(integ, first.q_minus, first.p_minus, first.g_minus, direction, depth - 1, eps, H0, rng)
    n_leap = first.n_leapfrog + second.n_leapfrog
    sum_acc = first.sum_accept + second.sum_accept
    if not second.valid:
        second.n_leapfrog = n_leap
        second.sum_accept = sum_acc
        return second

    log_w = np.logaddexp(first.log_weight, second.log_weight)
    # uniform multinomial choice within a sub-tree
    if math.log(rng.random()) < second.log_weight - log_w:
        q_prop, lp_prop, g_prop = second.q_prop, second.lp_prop, second.g_prop
    else:
        q_prop, lp_prop, g_prop = first.q_prop, first.lp_prop, first.g_prop

    left, right = (first, second) if direction > 0 else (second, first)
    rho = left.rho + right.rho
    m = integ.inv_metric
    valid = _no_u_turn(m * left.p_minus, m * right.p_plus, rho)
    valid = valid and _no_u_turn(m * left.p_minus, m * right.p_minus, left.rho + right.p_minus)
    valid = valid and _no_u_turn(m * left.p_plus, m * right.p_plus, right.rho + left.p_plus)
    return _Tree(
        left.q_minus, left.p_minus, left.g_minus,
        right.q_plus, right.p_plus, right.g_plus,
        q_prop, lp_prop, g_prop, rho, log_w, sum_acc, n_leap, valid, False,
    )


def nuts_transition(target, q, lp, g, eps, inv_metric, max_depth, rng):
    """One NUTS transition from ``(q, lp, g)``.

    Returns ``(q, lp, g, info)`` where ``info`` holds ``accept_stat``,
    ``divergent``, ``depth`` and ``n_leapfrog``.
    """
    integ = _Integrator(target, inv_metric)
    p0 = rng.standard_normal(q.size) / np.sqrt(inv_metric)
    H0 = -lp + integ.kinetic(p0)
    q_minus = q_plus = q
    p_minus = p_plus = p0
    g_minus = g_plus = g
    rho = p0.copy()
    log_w = 0.0
    q_new, lp_new, g_new = q, lp, g
    sum_accept = 0.0
    n_leap = 0
    divergent = False
    depth = 0
    while depth < max_depth:
        direction = 1 if rng.random() < 0.5 else -1
        if direction > 0:
            tree = _build_tree(integ, q_plus, p_plus, g_plus, 1, depth, eps, H0, rng)
        else:
            tree = _build_tree(integ, q_minus, p_minus, g_minus, -1, depth, eps, H0, rng)
        n_leap += tree.n_leapfrog
        sum_accept += tree.sum_accept
        depth += 1
        if not tree.valid:
            divergent = tree.divergent
            break
        # biased progressive sampling towards the new sub-tree
        if tree.log_weight > log_w or math.log(rng.random()) < tree.log_weight - log_w:
            q_new, lp_new, g_new = tree.q_prop, tree.lp_prop, tree.g_prop
        if direction > 0:
            left_p_plus = p_plus
            left_rho = rho
            q_plus, p_plus, g_plus = tree.q_plus, tree.p_plus, tree.g_plus
            right_p_minus, right_rho = tree.p_minus, tree.rho
            rho = left_rho + right_rho
        else:
            right_p_minus = p_minus
            right_rho = rho
            q_minus, p_minus, g_minus = tree.q_minus, tree.p_minus, tree.g_minus
            left_p_plus, left_rho = tree.p_plus, tree.rho
            rho = left_rho + right_rho
        log_w = np.logaddexp(log_w, tree.log_weight)
        m = inv_metric
        keep = _no_u_turn(m * p_minus, m * p_plus, rho)
        keep = keep and _no_u_turn(m * p_minus, m * right_p_minus, left_rho + right_p_minus)
        keep = keep and _no_u_turn(m * left_p_plus, m * p_plus, right_rho + left_p_plus)
        if not keep:
            break
    info = {
        "accept_stat": sum_accept / max(n_leap, 1),
        "divergent": divergent,
        "depth": depth,
        "n_leapfrog": n_leap,
    }
    return q_new, lp_new, g_new, info


# ---------------------------------------------------------------------------
# adaptation


class _DualAveraging:
    def __init__(self, eps0, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.restart(eps0)

    def restart(self, eps0):
        self.mu = math.log(10.0 * eps0)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = x_eta * x + (1.0 - x_eta) * self.x_bar
        return math.exp(x)

    def final(self) -> float:
        return math.exp(self.x_bar)


def _adaptation_windows(warmup: int):
    """End iterations (exclusive) of the metric-estimation windows.

    15% initial fast phase, 10% terminal fast phase, doubling slow windows
    starting at 25 iterations in between (last one stretched to fit).
    """
    init = int(0.15 * warmup)
    term = int(0.10 * warmup)
    slow_end = warmup - term
    ends = []
    if slow_end - init < 20:
        return init, ends
    size = min(25, slow_end - init)
    start = init
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start = end
        size *= 2
    return init, ends


def _find_reasonable_eps(target, q, lp, g, inv_metric, rng, eps=1.0):
    integ = _Integrator(target, inv_metric)
    p = rng.standard_normal(q.size) / np.sqrt(inv_metric)
    H0 = -lp + integ.kinetic(p)

    def log_ratio(e):
        _, p1, lp1, _ = integ.leapfrog(q, p, g, e)
        H = -lp1 + integ.kinetic(p1)
        return H0 - H if math.isfinite(H) else -math.inf

    direction = 1 if log_ratio(eps) > math.log(0.8) else -1
    for _ in range(100):
        eps_new = eps * (2.0**direction)
        lr = log_ratio(eps_new)
        if direction == 1 and not lr > math.log(0.8):
            break
        if direction == -1 and lr > math.log(0.8):
            eps = eps_new
            break
        eps = eps_new
    return eps


def _initial_point(target, dim, rng, scale):
    for _ in range(100):
        q = rng.normal(0.0, scale, dim)
        lp, g = target(q)
        if math.isfinite(lp) and lp > -1e299 and np.all(np.isfinite(g)):
            return q, lp, np.asarray(g, dtype=float)
    raise SamplerInitError("no finite-density starting point after 100 attempts")


def _chain_seed(seed: int, chain: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, chain])
    return np.random.Generator(np.random.Philox(ss))


def run_chain(target, dim: int, config: SamplerConfig, chain: int):
    """Warm up and sample one chain; the random stream depends only on (seed, chain)."""
    rng = _chain_seed(config.seed, chain)
    q, lp, g = _initial_point(target, dim, rng, config.init_scale)
    inv_metric = np.ones(dim)
    eps = _find_reasonable_eps(target, q, lp, g, inv_metric, rng)
    da = _DualAveraging(eps, config.target_accept)
    init, window_ends = _adaptation_windows(config.warmup_iters)
    window_start = init
    window_draws = []
    warm_div = 0
    for it in range(config.warmup_iters):
        q, lp, g, info = nuts_transition(target, q, lp, g, eps, inv_metric, config.max_tree_depth, rng)
        warm_div += info["divergent"]
        eps = da.update(info["accept_stat"])
        if window_ends and window_start <= it < window_ends[-1]:
            window_draws.append(q)
            if it + 1 in window_ends:
                x = np.asarray(window_draws)
                n = x.shape[0]
                var = x.var(axis=0, ddof=1) if n > 1 else np.ones(dim)
                inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                window_draws = []
                eps = _find_reasonable_eps(target, q, lp, g, inv_metric, rng, eps)
                da.restart(eps)
    if config.warmup_iters > 0:
        eps = da.final()

    n = config.sampling_iters
    draws = np.empty((n, dim))
    lps = np.empty(n)
    acc = np.empty(n)
    depth = np.empty(n, dtype=np.int64)
    div = 0
    for it in range(n):
        q, lp, g, info = nuts_transition(target, q, lp, g, eps, inv_metric, config.max_tree_depth, rng)
        draws[it] = q
        lps[it] = lp
        acc[it] = info["accept_stat"]
        depth[it] = info["depth"]
        div += info["divergent"]
    logger.debug("chain %d: step %.4g, %d divergences (%d in warmup)", chain, eps, div, warm_div)
    return draws, lps, acc, depth, div, eps, inv_metric


def _run_chain_star(args):
    return run_chain(*args)


def sample(
    target: Callable[[np.ndarray], tuple[float, np.ndarray]],
    dim: int,
    config: SamplerConfig | None = None,
    constrain: Callable[[np.ndarray], np.ndarray] | None = None,
    names: list[str] | None = None,
) -> PosteriorDraws:
    """Run ``config.chains`` NUTS chains on ``target``.

    Parameters
    ----------
    target : callable
        ``target(q) -> (log_density, gradient)``.  Must be picklable when
        ``config.threads > 1``.
    dim : int
        Dimension of ``q``.
    constrain : callable, optional
        Maps one unconstrained draw to the reported quantities.
    names : list of str, optional
        Labels for the reported quantities.
    """
    config = config or SamplerConfig()
    jobs = [(target, dim, config, c) for c in range(config.chains)]
    if config.threads > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.threads, config.chains)) as ex:
            results = list(ex.map(_run_chain_star, jobs))
    else:
        results = [_run_chain_star(j) for j in jobs]

    draws = np.stack([r[0] for r in results])
    constrained = None
    if constrain is not None:
        constrained = np.stack([np.array([constrain(x) for x in chain]) for chain in draws])
    return PosteriorDraws(
        draws=draws,
        log_density=np.stack([r[1] for r in results]),
        accept_stat=np.stack([r[2] for r in results]),
        tree_depth=np.stack([r[3] for r in results]),
        divergences=np.array([r[4] for r in results]),
        step_sizes=np.array([r[5] for r in results]),
        inv_metric=np.stack([r[6] for r in results]),
        names=list(names) if names else [],
        constrained=constrained,
    )


# ---------------------------------------------------------------------------
# diagnostics and summaries


def _as_chains(x) -> np.ndarray:
    """Accept draws objects or raw ``(chains, iters[, k])`` arrays."""
    if isinstance(x, PosteriorDraws):
        return x.constrained
    x = np.asarray(x, dtype=float)
    return x[:, :, None] if x.ndim == 2 else x


def split_rhat(draws) -> np.ndarray:
    """Split potential scale reduction factor per parameter.

    Each chain is halved; with ``n`` draws per half-chain, ``W`` the mean
    within-half variance and ``B`` the between-half variance of means
    (times ``n``), returns ``sqrt(((n-1)/n * W + B/n) / W)``.  Parameters
    that never move get NaN (with a warning); parameters constant within
    each half-chain but differing between them get ``inf``.
    """
    x = _as_chains(draws)
    chains, iters, k = x.shape
    if chains < 2 or iters < 4:
        raise ValueError("split R-hat needs >= 2 chains and >= 4 draws per chain")
    half = iters // 2
    parts = np.concatenate([x[:, :half], x[:, iters - half :]], axis=0)
    n = half
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    out = np.empty(k)
    for i in range(k):
        if W[i] > 0:
            out[i] = math.sqrt(((n - 1) / n * W[i] + B[i] / n) / W[i])
        elif B[i] > 0:
            out[i] = math.inf
        else:
            out[i] = math.nan
    if np.isnan(out).any():
        warnings.warn("split R-hat undefined for constant parameters", RuntimeWarning, stacklevel=2)
    return out


def _autocov(x):
    n = x.size
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x - x.mean(), size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    return ac / n


def _ess(chains: np.ndarray) -> float:
    m, n = chains.shape
    if n < 4 or np.all(chains == chains[0, 0]):
        return math.nan
    acov = np.array([_autocov(c) for c in chains])
    chain_mean = chains.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    rho_hat = np.zeros(n)
    rho_hat_even = 1.0
    rho_hat[0] = 1.0
    rho_hat_odd = 1.0 - (mean_var - acov[:, 1].mean()) / var_plus
    rho_hat[1] = rho_hat_odd
    t = 1
    while t < n - 3 and rho_hat_even + rho_hat_odd > 0:
        rho_hat_even = 1.0 - (mean_var - acov[:, t + 1].mean()) / var_plus
        rho_hat_odd = 1.0 - (mean_var - acov[:, t + 2].mean()) / var_plus
        if rho_hat_even + rho_hat_odd >= 0:
            rho_hat[t + 1] = rho_hat_even
            rho_hat[t + 2] = rho_hat_odd
        t += 2
    max_t = t - 2 if t > 1 else 1
    if rho_hat_even > 0:
        rho_hat[max_t + 1] = rho_hat_even
    # Geyer's initial monotone sequence
    t = 1
    while t <= max_t - 2:
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t]:
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0
            rho_hat[t + 2] = rho_hat[t + 1]
        t += 2
    tau = -1.0 + 2.0 * rho_hat[: max_t + 1].sum() + rho_hat[max_t + 1]
    tau = max(tau, 1.0 / math.log10(m * n))
    return m * n / tau


def ess_bulk(draws) -> np.ndarray:
    """Rank-normalized split-chain effective sample size per parameter."""
    x = _as_chains(draws)
    chains, iters, k = x.shape
    half = iters // 2
    parts = np.concatenate([x[:, :half], x[:, iters - half :]], axis=0)
    out = np.empty(k)
    for i in range(k):
        v = parts[:, :, i]
        if np.all(v == v.flat[0]):
            out[i] = math.nan
            continue
        r = stats.rankdata(v, method="average").reshape(v.shape)
        z = stats.norm.ppf((r - 0.375) / (v.size + 0.25))
        out[i] = _ess(z)
    return out


def diagnose(draws: PosteriorDraws) -> DiagnosticsReport:
    """R-hat (NaN everywhere for a single chain), bulk ESS and divergences."""
    k = draws.constrained.shape[2]
    if draws.n_chains >= 2 and draws.n_iters >= 4:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rhat = split_rhat(draws)
    else:
        rhat = np.full(k, math.nan)
    return DiagnosticsReport(list(draws.names), rhat, ess_bulk(draws), int(draws.divergences.sum()))


SUMMARY_COLUMNS = ("mean", "sd", "q2.5", "q50", "q97.5")


def summarize(draws) -> dict[str, dict[str, float]]:
    """Per-parameter mean, sd and 2.5/50/97.5% quantiles of pooled draws.

    Quantiles interpolate linearly between order statistics.
    """
    if isinstance(draws, PosteriorDraws):
        pooled, names = draws.pooled(), draws.names
    else:
        x = _as_chains(draws)
        pooled = x.reshape(-1, x.shape[2])
        names = [f"x[{i}]" for i in range(x.shape[2])]
    if pooled.shape[0] == 0:
        raise ValueError("no draws to summarize")
    qs = np.quantile(pooled, [0.025, 0.5, 0.975], axis=0)
    sd = pooled.std(axis=0, ddof=1) if pooled.shape[0] > 1 else np.zeros(pooled.shape[1])
    mean = pooled.mean(axis=0)
    return {
        name: {"mean": mean[i], "sd": sd[i], "q2.5": qs[0, i], "q50": qs[1, i], "q97.5": qs[2, i]}
        for i, name in enumerate(names)
    }


def write_draws_csv(draws: PosteriorDraws, path) -> None:
    """One row per draw: chain, iteration, log density, named parameters."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["chain", "iteration", "lp"] + list(draws.names))
        for c in range(draws.n_chains):
            for i in range(draws.n_iters):
                w.writerow(
                    [c, i, repr(float(draws.log_density[c, i]))]
                    + [repr(float(x)) for x in draws.constrained[c, i]]
                )


def read_draws_csv(path) -> PosteriorDraws:
    """Read a draws file back; only the constrained columns are recovered."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    names = header[3:]
    arr = np.array([[float(x) for x in r] for r in body])
    chains = int(arr[:, 0].max()) + 1
    iters = arr.shape[0] // chains
    vals = arr[:, 3:].reshape(chains, iters, -1)
    lp = arr[:, 2].reshape(chains, iters)
    return PosteriorDraws(
        draws=vals,
        log_density=lp,
        divergences=np.zeros(chains, dtype=np.int64),
        step_sizes=np.full(chains, math.nan),
        inv_metric=np.full((chains, vals.shape[2]), math.nan),
        accept_stat=np.full((chains, iters), math.nan),
        tree_depth=np.zeros((chains, iters), dtype=np.int64),
        names=names,
    )
