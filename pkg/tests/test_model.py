import math
import pickle

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special, stats

from conftest import SCENARIO_A, SCENARIO_B, SCENARIO_RATES, small_params
from threshold_test.model import (
    CENTERED,
    NONCENTERED,
    CellSignal,
    CountsTable,
    DegenerateCellError,
    ModelParams,
    ThresholdModel,
    binomial_loglik,
    cell_rates,
    hit_prob,
    link_lambda,
    link_phi,
    log_likelihood,
    log_posterior_grad,
    log_prior,
    search_prob,
)

PARAMETERIZATIONS = [CENTERED, NONCENTERED]


def scipy_rates(phi, lam, t):
    a, b = phi * lam, (1 - phi) * lam
    p = special.betainc(a, b, t)
    p = 1 - p
    q = phi * (1 - special.betainc(a + 1, b, t)) / p
    return p, q


# -- counts --------------------------------------------------------------------


def test_counts_invariants():
    with pytest.raises(ValueError):
        CountsTable(["a"], ["x"], [[5]], [[6]], [[0]])
    with pytest.raises(ValueError):
        CountsTable(["a"], ["x"], [[5]], [[2]], [[3]])
    with pytest.raises(ValueError):
        CountsTable(["a", "a"], ["x"], [[1], [1]], [[0], [0]], [[0], [0]])


def test_from_cells_sums_repeats_and_fills_zeros():
    c = CountsTable.from_cells([("a", "x", 3, 1, 0), ("a", "x", 2, 1, 1), ("b", "y", 4, 0, 0)])
    assert c.groups == ["a", "b"] and c.depts == ["x", "y"]
    assert c.n.tolist() == [[5, 0], [0, 4]]
    assert c.searches[0, 0] == 2 and c.hits[0, 0] == 1


def test_reference_dept_tie_break():
    c = CountsTable.from_cells([("a", "zz", 10, 0, 0), ("a", "aa", 10, 0, 0), ("a", "mm", 3, 0, 0)])
    assert c.depts[c.reference_dept()] == "aa"


# -- links --------------------------------------------------------------------


def test_link_phi():
    assert link_phi(0.0, 0.0) == 0.5
    assert link_phi(math.log(3), 0.0) == pytest.approx(0.75, abs=1e-15)
    assert link_phi(-2.1, 0.4) == pytest.approx(1 / (1 + math.exp(1.7)), rel=1e-14)
    assert 0.0 < link_phi(-800.0, 0.0) < 1e-300 or link_phi(-800.0, 0.0) == 0.0
    assert link_phi(800.0, 0.0) == 1.0


def test_link_lambda():
    assert link_lambda(0.0, 0.0) == 1.0
    assert link_lambda(math.log(29), 0.0) == pytest.approx(29.0, rel=1e-14)
    assert link_lambda(2.0, 1.5) == pytest.approx(33.11545195869231, rel=1e-14)
    assert link_lambda(30.0, 0.0) == pytest.approx(math.exp(20.0))
    assert link_lambda(-30.0, 0.0) == pytest.approx(math.exp(-20.0))


def test_cell_signal():
    c = CellSignal.from_beta(10.2, 18.8)
    assert c.phi == pytest.approx(10.2 / 29) and c.lam == pytest.approx(29.0)
    assert (c.a, c.b) == pytest.approx((10.2, 18.8))
    assert c.phi < c.mu < 1
    with pytest.raises(ValueError):
        CellSignal(1.0, 3.0)
    with pytest.raises(ValueError):
        CellSignal(0.3, 0.0)


# -- search and hit probabilities ------------------------------------------------------


CASES = [(name, sc, color) for name, sc in (("a", SCENARIO_A), ("b", SCENARIO_B)) for color in ("red", "blue")]


@pytest.mark.parametrize("name,scenario,color", CASES, ids=[f"{c[0]}-{c[2]}" for c in CASES])
def test_infra_marginality_search_rate(name, scenario, color):
    alpha, beta, t = scenario[color]
    assert search_prob(CellSignal.from_beta(alpha, beta), t) == pytest.approx(SCENARIO_RATES[color][0], abs=0.01)


@pytest.mark.parametrize("name,scenario,color", CASES, ids=[f"{c[0]}-{c[2]}" for c in CASES])
def test_infra_marginality_hit_rate(name, scenario, color):
    alpha, beta, t = scenario[color]
    assert hit_prob(CellSignal.from_beta(alpha, beta), t) == pytest.approx(SCENARIO_RATES[color][1], abs=0.01)


def _rates_in(scenario, color):
    alpha, beta, t = scenario[color]
    cell = CellSignal.from_beta(alpha, beta)
    return search_prob(cell, t), hit_prob(cell, t)


@pytest.mark.parametrize("color", ["red", "blue"])
def test_scenarios_equivalent_search_rate(color):
    assert _rates_in(SCENARIO_A, color)[0] == pytest.approx(_rates_in(SCENARIO_B, color)[0], abs=0.005)


@pytest.mark.parametrize("color", ["red", "blue"])
def test_scenarios_equivalent_hit_rate(color):
    assert _rates_in(SCENARIO_A, color)[1] == pytest.approx(_rates_in(SCENARIO_B, color)[1], abs=0.005)


def test_scenario_threshold_orderings_flip():
    assert SCENARIO_A["red"][2] < SCENARIO_A["blue"][2]
    assert SCENARIO_B["red"][2] > SCENARIO_B["blue"][2]


def test_threshold_near_zero_limits():
    cell = CellSignal(0.3, 8.0)
    assert search_prob(cell, 1e-12) == pytest.approx(1.0, abs=1e-9)
    assert hit_prob(cell, 1e-12) == pytest.approx(0.3, abs=1e-9)


def test_invalid_threshold():
    with pytest.raises(ValueError):
        search_prob(CellSignal(0.3, 8.0), 0.0)
    with pytest.raises(ValueError):
        hit_prob(CellSignal(0.3, 8.0), 1.0)


def test_degenerate_cell():
    with pytest.raises(DegenerateCellError):
        hit_prob(CellSignal(0.01, 5000.0), 0.9)


def test_hit_prob_deep_tail_finite():
    # upper tail ~1e-40: a naive 1 - I ratio would be 0/0
    cell = CellSignal(0.1, 40.0)
    q = hit_prob(cell, 0.8)
    assert 0.8 < q < 1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(1.0, 60.0), st.floats(0.02, 0.9))
def test_rates_match_monte_carlo(phi, lam, t):
    rng = np.random.default_rng(abs(hash((phi, lam, t))) % 2**32)
    cell = CellSignal(phi, lam)
    x = rng.beta(cell.a, cell.b, 200_000)
    above = x >= t
    p_hat = above.mean()
    se_p = math.sqrt(max(p_hat * (1 - p_hat), 1e-12) / x.size)
    assert abs(search_prob(cell, t) - p_hat) < 3.5 * se_p + 1e-6
    if above.sum() > 200:
        q_hat = x[above].mean()
        se_q = x[above].std() / math.sqrt(above.sum())
        assert abs(hit_prob(cell, t) - q_hat) < 4 * se_q + 1e-6


@settings(max_examples=100, deadline=None)
@given(st.floats(0.02, 0.98), st.floats(0.5, 200.0), st.floats(0.01, 0.95))
def test_hit_prob_exceeds_threshold(phi, lam, t):
    cell = CellSignal(phi, lam)
    try:
        q = hit_prob(cell, t)
    except DegenerateCellError:
        return
    assert q > t or q == pytest.approx(t, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.5, 100.0))
def test_monotone_in_threshold(phi, lam):
    cell = CellSignal(phi, lam)
    ts = np.linspace(0.01, 0.95, 40)
    ps, qs = [], []
    for t in ts:
        ps.append(search_prob(cell, t))
        try:
            qs.append(hit_prob(cell, t))
        except DegenerateCellError:
            break
    assert all(b <= a for a, b in zip(ps, ps[1:]))
    assert all(b < a for a, b in zip(ps, ps[1:]) if a > 1e-300 and a < 1 - 1e-15)
    assert all(b >= a - 1e-12 for a, b in zip(qs, qs[1:]))


def test_cell_rates_vectorized_matches_scalar():
    p = small_params()
    sp, hq = cell_rates(p)
    for i in range(2):
        for j in range(3):
            cell = CellSignal(p.cell_phi()[i, j], p.cell_lambda()[i, j])
            assert sp[i, j] == pytest.approx(search_prob(cell, p.t[i, j]), rel=1e-12)
            assert hq[i, j] == pytest.approx(hit_prob(cell, p.t[i, j]), rel=1e-12)
            assert (sp[i, j], hq[i, j]) == pytest.approx(scipy_rates(cell.phi, cell.lam, p.t[i, j]), rel=1e-9)


# -- likelihood -------------------------------------------------------------------


def test_binomial_loglik_single_cell():
    assert binomial_loglik(1, 1, 1, 0.5, 0.5) == pytest.approx(math.log(0.25))
    assert binomial_loglik(0, 0, 0, 0.3, 0.3) == 0.0
    assert binomial_loglik(5, 0, 0, 0.3, 0.9) == pytest.approx(5 * math.log(0.7))
    assert binomial_loglik(3, 1, 0, 0.0, 0.5) == -math.inf


def test_empty_table_loglik():
    c = CountsTable([], [], np.zeros((0, 0)), np.zeros((0, 0)), np.zeros((0, 0)))
    empty = ModelParams([], [], [], [], np.zeros((0, 0)), 0.0, 1.0, 0.0, 1.0, [], [])
    assert c.is_empty()
    assert log_likelihood(c, empty) == 0.0


def test_loglik_against_scipy_binomials():
    params = small_params(2, 2, seed=3)
    c = CountsTable(["a", "b"], ["x", "y"], [[120, 40], [0, 300]], [[30, 5], [0, 60]], [[9, 0], [0, 20]])
    expected = 0.0
    phi, lam = params.cell_phi(), params.cell_lambda()
    for i in range(2):
        for j in range(2):
            n, S, H = c.n[i, j], c.searches[i, j], c.hits[i, j]
            if n == 0:
                continue
            p, q = scipy_rates(phi[i, j], lam[i, j], params.t[i, j])
            expected += stats.binom.logpmf(S, n, p)
            if S > 0:
                expected += stats.binom.logpmf(H, S, q)
    assert log_likelihood(c, params) == pytest.approx(expected, rel=1e-10)


def test_loglik_zero_stop_cells_contribute_nothing():
    params = small_params(2, 2, seed=3)
    c0 = CountsTable(["a", "b"], ["x", "y"], [[10, 0], [0, 0]], [[3, 0], [0, 0]], [[1, 0], [0, 0]])
    p, q = cell_rates(params)
    assert log_likelihood(c0, params) == pytest.approx(binomial_loglik(10, 3, 1, p[0, 0], q[0, 0]), rel=1e-12)


def test_loglik_extreme_cell_is_finite_not_nan():
    # search probability ~1e-17000: log-space tails keep the value finite
    params = small_params(1, 1, seed=1)
    params.phi_r[:] = -5.0
    params.lambda_r[:] = math.log(1e4)
    params.t[:] = 0.99
    c = CountsTable(["a"], ["x"], [[10]], [[3]], [[1]])
    ll = log_likelihood(c, params)
    assert ll < -1e4 and not math.isnan(ll)


def test_loglik_minus_inf_when_probability_is_exactly_zero():
    params = small_params(1, 1, seed=1)
    params.phi_r[:] = -5.0
    params.lambda_r[:] = 20.0
    params.t[:] = 1 - 1e-16
    c = CountsTable(["a"], ["x"], [[10]], [[3]], [[1]])
    assert log_likelihood(c, params) == -math.inf


def test_likelihood_aggregation_equivalence():
    """Per-stop likelihood (signal integrated out by quadrature) equals the sufficient-statistics form."""
    phi, lam, t = 0.3, 7.0, 0.35
    a, b = phi * lam, (1 - phi) * lam
    dens = stats.beta(a, b).pdf
    p_search = integrate.quad(dens, t, 1, epsabs=1e-14, epsrel=1e-13)[0]
    p_hit = integrate.quad(lambda x: x * dens(x), t, 1, epsabs=1e-14, epsrel=1e-13)[0]
    rng = np.random.default_rng(0)
    stops = rng.integers(0, 3, 60)  # 0 not searched, 1 searched no hit, 2 hit
    per_stop = sum(
        math.log(1 - p_search) if s == 0 else math.log(p_search - p_hit) if s == 1 else math.log(p_hit) for s in stops
    )
    n, S, H = len(stops), int((stops > 0).sum()), int((stops == 2).sum())
    params = ModelParams(
        phi_r=[special.logit(phi)],
        lambda_r=[math.log(lam)],
        phi_d=[0.0],
        lambda_d=[0.0],
        t=[[t]],
        mu_phi=0.0,
        sigma_phi=1.0,
        mu_lambda=0.0,
        sigma_lambda=1.0,
        mu_t=[0.0],
        sigma_t=[1.0],
    )
    ll = log_likelihood(CountsTable(["g"], ["d"], [[n]], [[S]], [[H]]), params)
    combinatorial = special.gammaln(n + 1) - special.gammaln(S + 1) - special.gammaln(n - S + 1)
    combinatorial += special.gammaln(S + 1) - special.gammaln(H + 1) - special.gammaln(S - H + 1)
    assert ll - combinatorial == pytest.approx(per_stop, rel=1e-6)


# -- prior ------------------------------------------------------------------------


def _unit_params(**kw):
    base = dict(
        phi_r=[0.0],
        lambda_r=[0.0],
        phi_d=[0.0],
        lambda_d=[0.0],
        t=[[0.5]],
        mu_phi=0.0,
        sigma_phi=1.0,
        mu_lambda=0.0,
        sigma_lambda=1.0,
        mu_t=[0.0],
        sigma_t=[1.0],
    )
    base.update(kw)
    return ModelParams(**base)


def test_log_prior_closed_form():
    # five N(0,2) at 0, three half-N(0,2) at 1, one N(0,1) at logit(0.5) = 0
    n02 = -math.log(2) - 0.5 * math.log(2 * math.pi)
    half = math.log(2) - math.log(2) - 0.5 * math.log(2 * math.pi) - 1 / 8
    n01 = -0.5 * math.log(2 * math.pi)
    assert log_prior(_unit_params()) == pytest.approx(5 * n02 + 3 * half + n01, rel=1e-14)


def test_log_prior_phi_r_shift():
    assert log_prior(_unit_params()) - log_prior(_unit_params(phi_r=[2.0])) == pytest.approx(0.5, abs=1e-14)


def test_log_prior_matches_scipy():
    p = small_params(2, 3, seed=4)
    others = [1, 2]
    expected = stats.norm(0, 2).logpdf(np.r_[p.phi_r, p.lambda_r, p.mu_phi, p.mu_lambda, p.mu_t]).sum()
    expected += stats.halfnorm(scale=2).logpdf(np.r_[p.sigma_phi, p.sigma_lambda, p.sigma_t]).sum()
    expected += stats.norm(p.mu_phi, p.sigma_phi).logpdf(p.phi_d[others]).sum()
    expected += stats.norm(p.mu_lambda, p.sigma_lambda).logpdf(p.lambda_d[others]).sum()
    expected += stats.norm(p.mu_t[:, None], p.sigma_t[:, None]).logpdf(special.logit(p.t)).sum()
    assert log_prior(p) == pytest.approx(expected, rel=1e-12)


def test_log_prior_sigma_to_zero():
    p = small_params(2, 3, seed=4)
    p.sigma_phi = 1e-12
    assert log_prior(p) < -1e15
    p.phi_d[[1, 2]] = p.mu_phi
    assert math.isfinite(log_prior(p))


def test_params_validate():
    p = small_params()
    p.phi_d[p.ref] = 0.1
    with pytest.raises(ValueError):
        p.validate()
    p = small_params()
    p.t[0, 0] = 1.0
    with pytest.raises(ValueError):
        p.validate()


# -- unconstrained target -------------------------------------------------------------


@pytest.mark.parametrize("par", PARAMETERIZATIONS)
def test_round_trip(small_counts, par):
    m = ThresholdModel(small_counts, parameterization=par)
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rng.normal(0, 1, m.dim)
        p = m.constrain(v)
        x = m.constrained_vector(v)
        # params -> vector -> params is exact to 1e-12
        assert np.max(np.abs(m.constrained_vector(m.unconstrain(p)) - x)) < 1e-12
        assert np.max(np.abs(m.constrained_vector(m.unconstrain(m.params_from_vector(x))) - x)) < 1e-12
        # the other direction passes through thresholds stored in (0, 1), which
        # costs digits where the inverse logit saturates
        assert np.max(np.abs(m.unconstrain(p) - v)) < 1e-8
        assert m.log_density(v) == pytest.approx(m.log_density(m.unconstrain(p)), rel=1e-13, abs=1e-10)


@pytest.mark.parametrize("par", PARAMETERIZATIONS)
def test_zero_vector(small_counts, par):
    m = ThresholdModel(small_counts, parameterization=par)
    p = m.constrain(np.zeros(m.dim))
    assert np.all(p.t == 0.5)
    assert p.sigma_phi == p.sigma_lambda == 1.0 and np.all(p.sigma_t == 1.0)
    assert np.all(p.phi_d == 0) and np.all(p.phi_r == 0)


def test_noncentered_threshold_offset(small_counts):
    m = ThresholdModel(small_counts, parameterization=NONCENTERED)
    p = m.constrain(np.random.default_rng(2).normal(size=m.dim))
    p.t[1, 4] = 0.07
    v = m.unconstrain(p)
    k = m.unconstrained_names().index("z_t[g1,d4]")
    assert v[k] == pytest.approx((special.logit(0.07) - p.mu_t[1]) / p.sigma_t[1], rel=1e-12)


def test_centered_threshold_coordinate(small_counts):
    m = ThresholdModel(small_counts, parameterization=CENTERED)
    p = m.constrain(np.zeros(m.dim))
    p.t[1, 4] = 0.07
    assert m.unconstrain(p)[m.unconstrained_names().index("logit_t[g1,d4]")] == pytest.approx(special.logit(0.07))


def test_reference_effects_pinned(small_counts):
    m = ThresholdModel(small_counts)
    p = m.constrain(np.random.default_rng(0).normal(size=m.dim))
    assert p.phi_d[m.ref] == 0.0 and p.lambda_d[m.ref] == 0.0
    assert m.ref == small_counts.reference_dept()


def test_dimension(small_counts):
    R, D = small_counts.shape
    m = ThresholdModel(small_counts)
    assert m.dim == 2 * R + 4 + 2 * (D - 1) + 2 * R + R * D
    assert len(m.unconstrained_names()) == m.dim
    assert len(m.param_names()) == len(m.constrained_vector(np.zeros(m.dim)))


@pytest.mark.parametrize("par", PARAMETERIZATIONS)
def test_density_decomposes(small_counts, par):
    m = ThresholdModel(small_counts, parameterization=par)
    rng = np.random.default_rng(5)
    for _ in range(5):
        v = rng.normal(0, 0.5, m.dim)
        p = m.constrain(v)
        expected = log_prior(p) + log_likelihood(small_counts, p) + m.log_jacobian(v)
        assert m.log_density(v) == pytest.approx(expected, rel=1e-11)


@pytest.mark.parametrize("par", PARAMETERIZATIONS)
def test_log_jacobian_by_finite_differences(par):
    # priors live on (scales, effects, logit t); check log|det J| of that map numerically
    c = CountsTable.from_cells([("a", "x", 5, 1, 0), ("a", "y", 3, 1, 1), ("b", "x", 4, 2, 1), ("b", "y", 2, 0, 0)])
    m = ThresholdModel(c, parameterization=par)
    v = np.random.default_rng(3).normal(size=m.dim)

    def forward(v):
        p = m.constrain(v)
        others = [j for j in range(m.D) if j != m.ref]
        return np.r_[
            p.phi_r,
            p.lambda_r,
            p.mu_phi,
            p.sigma_phi,
            p.mu_lambda,
            p.sigma_lambda,
            p.phi_d[others],
            p.lambda_d[others],
            p.mu_t,
            p.sigma_t,
            special.logit(p.t).ravel(),
        ]

    h = 1e-6
    J = np.array([(forward(v + h * e) - forward(v - h * e)) / (2 * h) for e in np.eye(m.dim)]).T
    assert m.log_jacobian(v) == pytest.approx(np.linalg.slogdet(J)[1], abs=1e-6)


def _fd_check(m, v, h=1e-5):
    _, g = m(v)
    fd = np.empty(m.dim)
    for i in range(m.dim):
        e = np.zeros(m.dim)
        e[i] = h
        fd[i] = (m(v + e)[0] - m(v - e)[0]) / (2 * h)
    return np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1.0))


@pytest.mark.parametrize("par", PARAMETERIZATIONS)
def test_gradient_matches_finite_differences(small_counts, par):
    m = ThresholdModel(small_counts, parameterization=par)
    rng = np.random.default_rng(11)
    worst = max(_fd_check(m, rng.normal(0, 0.7, m.dim)) for _ in range(10))
    assert worst < 1e-5


def test_log_posterior_grad_wrapper(small_counts):
    m = ThresholdModel(small_counts)
    v = np.random.default_rng(0).normal(size=m.dim)
    lp, g = log_posterior_grad(v, small_counts)
    lp2, g2 = m(v)
    assert lp == lp2 and np.array_equal(g, g2)


def test_compiled_kernel_matches_vectorized_reference(small_counts):
    for par in PARAMETERIZATIONS:
        m = ThresholdModel(small_counts, parameterization=par)
        rng = np.random.default_rng(9)
        for _ in range(10):
            v = rng.normal(0, 1, m.dim)
            a, ga = m._log_density_grad(v)
            b, gb = m._log_density_grad_numpy(v)
            assert a == pytest.approx(b, rel=1e-12)
            assert np.allclose(ga, gb, rtol=1e-9, atol=1e-9)


def test_pathological_region_finite(small_counts):
    m = ThresholdModel(small_counts)
    for scale in (10.0, 50.0, 1e3):
        v = np.random.default_rng(1).normal(0, scale, m.dim)
        lp, g = m(v)
        assert not math.isnan(lp) and np.all(np.isfinite(g))


def test_threshold_offset_with_zero_counts_changes_only_prior():
    c = CountsTable(["a", "b"], ["x", "y"], [[10, 0], [5, 7]], [[2, 0], [1, 3]], [[1, 0], [0, 1]])
    for par in PARAMETERIZATIONS:
        m = ThresholdModel(c, parameterization=par)
        v = np.random.default_rng(0).normal(size=m.dim)
        k = m._sl["t"].start + 1  # cell (a, y) has no stops
        w = v.copy()
        w[k] += 0.7
        p, q = m.constrain(v), m.constrain(w)
        assert log_likelihood(c, p) == pytest.approx(log_likelihood(c, q), rel=1e-14)
        diff = m.log_density(w) - m.log_density(v)
        expected = log_prior(q) - log_prior(p) + m.log_jacobian(w) - m.log_jacobian(v)
        assert diff == pytest.approx(expected, abs=1e-10)


def test_model_pickles(small_counts):
    m = ThresholdModel(small_counts)
    v = np.random.default_rng(0).normal(size=m.dim)
    m2 = pickle.loads(pickle.dumps(m))
    assert m2(v)[0] == m(v)[0]


def test_bad_parameterization(small_counts):
    with pytest.raises(ValueError):
        ThresholdModel(small_counts, parameterization="partial")
