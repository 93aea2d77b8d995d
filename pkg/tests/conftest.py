import numpy as np
import pytest

from threshold_test.model import CountsTable, ModelParams

# Signal curves and thresholds of the two observationally equivalent
# infra-marginality scenarios, as (alpha, beta, threshold).
SCENARIO_A = {"red": (10.2, 18.8, 0.30), "blue": (10.3, 16.2, 0.35)}
SCENARIO_B = {"red": (10.8, 19.8, 0.30), "blue": (2.1, 4.1, 0.25)}
SCENARIO_RATES = {"red": (0.71, 0.39), "blue": (0.64, 0.44)}

# Aggregate stop counts and printed rates for the four driver groups.
STATEWIDE_STOPS = {"white": 2_227_214, "black": 1_810_608, "hispanic": 384_186, "asian": 67_508}
STATEWIDE_SEARCH = {"white": "3.1%", "black": "5.4%", "hispanic": "4.1%", "asian": "1.7%"}
STATEWIDE_HIT = {"white": "32%", "black": "29%", "hispanic": "19%", "asian": "26%"}


def statewide_counts(n_depts: int = 3) -> CountsTable:
    """Counts split over departments whose pooled rates hit the printed values exactly.

    Searches and hits are chosen from the printed rates and then spread
    unevenly over departments, so only the pooling recovers the targets.
    """
    rates = {"white": (0.031, 0.32), "black": (0.054, 0.29), "hispanic": (0.041, 0.19), "asian": (0.017, 0.26)}
    weights = np.arange(1, n_depts + 1, dtype=float)
    weights /= weights.sum()
    cells = []
    for g, n in STATEWIDE_STOPS.items():
        sr, hr = rates[g]
        S = round(n * sr)
        H = round(S * hr)
        ns = _split(n, weights)
        ss = _split(S, weights[::-1])
        hs = _split(H, weights[::-1])
        for j in range(n_depts):
            cells.append((g, f"dept{j}", ns[j], ss[j], hs[j]))
    return CountsTable.from_cells(cells, groups=list(STATEWIDE_STOPS), depts=[f"dept{j}" for j in range(n_depts)])


def _split(total, weights):
    parts = np.floor(total * weights).astype(np.int64)
    parts[0] += total - parts.sum()
    return parts


def small_params(R=2, D=3, seed=0, ref=0) -> ModelParams:
    rng = np.random.default_rng(seed)
    phi_d = rng.normal(0, 0.3, D)
    lam_d = rng.normal(0, 0.3, D)
    phi_d[ref] = lam_d[ref] = 0.0
    return ModelParams(
        phi_r=rng.normal(-1.5, 0.3, R),
        lambda_r=np.log(rng.uniform(4, 12, R)),
        phi_d=phi_d,
        lambda_d=lam_d,
        t=rng.uniform(0.05, 0.4, (R, D)),
        mu_phi=0.1,
        sigma_phi=0.4,
        mu_lambda=-0.1,
        sigma_lambda=0.3,
        mu_t=rng.normal(-2, 0.3, R),
        sigma_t=rng.uniform(0.2, 0.6, R),
        ref=ref,
    )


@pytest.fixture
def statewide():
    return statewide_counts()


@pytest.fixture
def small_counts():
    rng = np.random.default_rng(7)
    n = rng.integers(50, 3000, (4, 10))
    n[1, 3] = 0
    S = (n * rng.uniform(0.02, 0.3, n.shape)).astype(np.int64)
    H = (S * rng.uniform(0.1, 0.5, n.shape)).astype(np.int64)
    S[2, 5] = 0
    H[2, 5] = 0
    return CountsTable([f"g{i}" for i in range(4)], [f"d{j}" for j in range(10)], n, S, H)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
