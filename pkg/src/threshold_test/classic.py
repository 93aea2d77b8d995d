"""Benchmark and outcome tests on per-cell counts.

Both tests compare a group against a reference group department by
department.  Verdicts are signs: ``+1`` flags the group as treated more
harshly than the reference, ``-1`` the opposite, ``0`` no difference.  Cells
below a minimum-count floor are reported as skipped rather than judged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .model import CountsTable

MIN_STOPS = 50
MIN_SEARCHES = 10
VERDICTS = (-1, 0, 1)


@dataclass
class RateTable:
    """Search and hit rates per cell and pooled per group.

    ``hit_rate`` is NaN where a cell has no searches; group aggregates pool
    counts over departments before dividing.
    """

    counts: CountsTable
    search_rate: np.ndarray = field(init=False)
    hit_rate: np.ndarray = field(init=False)

    def __post_init__(self):
        c = self.counts
        with np.errstate(invalid="ignore", divide="ignore"):
            self.search_rate = np.where(c.n > 0, c.searches / np.maximum(c.n, 1), np.nan)
            self.hit_rate = np.where(c.searches > 0, c.hits / np.maximum(c.searches, 1), np.nan)

    @classmethod
    def from_counts(cls, counts: CountsTable) -> "RateTable":
        return cls(counts)

    def group_stops(self) -> np.ndarray:
        return self.counts.n.sum(axis=1)

    def group_search_rate(self) -> np.ndarray:
        n = self.counts.n.sum(axis=1)
        s = self.counts.searches.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(n > 0, s / np.maximum(n, 1), np.nan)

    def group_hit_rate(self) -> np.ndarray:
        s = self.counts.searches.sum(axis=1)
        h = self.counts.hits.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(s > 0, h / np.maximum(s, 1), np.nan)


@dataclass
class TestResult:
    """Per-department verdicts of one group-vs-reference comparison.

    ``verdicts`` has shape (R, D) with the reference row all zero; ``skipped``
    marks cells that fell below the count floor (their verdict is zero too).
    ``kind`` is ``"benchmark"``, ``"outcome"`` or ``"threshold"``.
    """

    kind: str
    rates: RateTable | None
    reference: str
    groups: list[str]
    depts: list[str]
    verdicts: np.ndarray
    skipped: np.ndarray

    @property
    def ref_index(self) -> int:
        return self.groups.index(self.reference)

    def verdict(self, group: str, dept: str) -> int | None:
        r, d = self.groups.index(group), self.depts.index(dept)
        return None if self.skipped[r, d] else int(self.verdicts[r, d])

    def flagged(self, group: str) -> int:
        """Number of departments where ``group`` is flagged."""
        return int(np.sum(self.verdicts[self.groups.index(group)] == 1))


def _reference_index(counts: CountsTable, reference_group: str) -> int:
    if reference_group not in counts.groups:
        raise ValueError(f"reference group {reference_group!r} not in counts")
    return counts.groups.index(reference_group)


def _compare(kind, counts, reference_group, denom, rate, floor, sign):
    ref = _reference_index(counts, reference_group)
    R, D = counts.shape
    verdicts = np.zeros((R, D), dtype=np.int64)
    skipped = np.zeros((R, D), dtype=bool)
    for r in range(R):
        if r == ref:
            continue
        for d in range(D):
            if denom[r, d] == 0 or denom[ref, d] == 0 or min(denom[r, d], denom[ref, d]) < floor:
                skipped[r, d] = True
                continue
            verdicts[r, d] = sign * np.sign(rate[r, d] - rate[ref, d])
    return verdicts, skipped


def benchmark_test(counts: CountsTable, reference_group: str, min_stops: int = MIN_STOPS) -> TestResult:
    """Compare search rates: a group searched more often than the reference is flagged."""
    rates = RateTable(counts)
    v, sk = _compare("benchmark", counts, reference_group, counts.n, rates.search_rate, min_stops, 1)
    return TestResult("benchmark", rates, reference_group, list(counts.groups), list(counts.depts), v, sk)


def outcome_test(counts: CountsTable, reference_group: str, min_searches: int = MIN_SEARCHES) -> TestResult:
    """Compare hit rates: a group whose searches succeed less often is flagged."""
    rates = RateTable(counts)
    v, sk = _compare("outcome", counts, reference_group, counts.searches, rates.hit_rate, min_searches, -1)
    return TestResult("outcome", rates, reference_group, list(counts.groups), list(counts.depts), v, sk)


def threshold_verdicts(
    t_draws: np.ndarray, counts: CountsTable, reference_group: str, credible: float | None = None
) -> TestResult:
    """Verdicts from posterior threshold draws of shape (n_draws, R, D).

    A group is flagged in a department when its posterior mean threshold is
    below the reference's.  With ``credible`` (e.g. 0.95) the verdict is zero
    unless the central interval of the difference excludes zero.
    """
    ref = _reference_index(counts, reference_group)
    diff = t_draws[:, ref : ref + 1, :] - t_draws
    verdicts = np.sign(diff.mean(axis=0)).astype(np.int64)
    if credible is not None:
        tail = 50.0 * (1.0 - credible)
        lo, hi = np.percentile(diff, [tail, 100.0 - tail], axis=0)
        verdicts[(lo <= 0) & (hi >= 0)] = 0
    verdicts[ref] = 0
    skipped = np.zeros_like(verdicts, dtype=bool)
    skipped[:, counts.n[ref] == 0] = True
    skipped[counts.n == 0] = True
    verdicts[skipped] = 0
    return TestResult("threshold", None, reference_group, list(counts.groups), list(counts.depts), verdicts, skipped)


def concordance_report(*results: TestResult) -> dict[str, dict[str, np.ndarray]]:
    """Pairwise 3x3 verdict cross-tabulations per non-reference group.

    Returns ``{group: {"benchmark~outcome": matrix, ...}}`` where
    ``matrix[i, j]`` counts departments with verdict ``VERDICTS[i]`` in the
    first test and ``VERDICTS[j]`` in the second; departments skipped by
    either test are left out.  ``None`` entries are ignored.
    """
    results = [r for r in results if r is not None]
    if not results:
        return {}
    base = results[0]
    for r in results[1:]:
        if r.groups != base.groups or r.depts != base.depts or r.reference != base.reference:
            raise ValueError("results cover different cells")
    out = {}
    for gi, g in enumerate(base.groups):
        if g == base.reference:
            continue
        tabs = {}
        for i in range(len(results)):
            for j in range(i + 1, len(results)):
                a, b = results[i], results[j]
                m = np.zeros((3, 3), dtype=np.int64)
                ok = ~(a.skipped[gi] | b.skipped[gi])
                for va, vb in zip(a.verdicts[gi][ok], b.verdicts[gi][ok]):
                    m[va + 1, vb + 1] += 1
                tabs[f"{a.kind}~{b.kind}"] = m
        out[g] = tabs
    return out


def concordance_rows(report: dict[str, dict[str, np.ndarray]]):
    """Flatten a concordance report to (group, pair, verdict_a, verdict_b, count) rows."""
    for g, tabs in report.items():
        for pair, m in tabs.items():
            for i, va in enumerate(VERDICTS):
                for j, vb in enumerate(VERDICTS):
                    yield g, pair, va, vb, int(m[i, j])


def _pct(x: float) -> str:
    return "" if not np.isfinite(x) else f"{100.0 * x:.1f}%"


def table_rows(rates: RateTable, percent: bool = True):
    """Group-level rows: group, stops, search rate, hit rate."""
    sr, hr, n = rates.group_search_rate(), rates.group_hit_rate(), rates.group_stops()
    for g, ni, s, h in zip(rates.counts.groups, n, sr, hr):
        if percent:
            yield g, int(ni), _pct(s), "" if not np.isfinite(h) else f"{100.0 * h:.0f}%"
        else:
            yield g, int(ni), float(s), float(h)


def write_rate_table(rates: RateTable, stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["group", "stops", "search_rate", "hit_rate"])
    w.writerows(table_rows(rates))


def scatter_rows(result: TestResult):
    """Per-department points: x is the reference rate, y the group rate, size the group's stops."""
    rates = result.rates
    if rates is None:
        raise ValueError("threshold results carry no rates; use the threshold scatter instead")
    rate = rates.search_rate if result.kind == "benchmark" else rates.hit_rate
    ref = result.ref_index
    n = rates.counts.n
    for r, g in enumerate(result.groups):
        if r == ref:
            continue
        for d, dept in enumerate(result.depts):
            if result.skipped[r, d]:
                continue
            yield g, dept, float(rate[ref, d]), float(rate[r, d]), int(n[r, d]), int(result.verdicts[r, d])


def write_scatter(result: TestResult, stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["group", "dept", "reference_rate", "group_rate", "n", "verdict"])
    w.writerows(scatter_rows(result))
