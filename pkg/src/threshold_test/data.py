"""Stop-level records: CSV parsing, filtering policy, aggregation, relabeling.

Input schema (header required, UTF-8, comma-delimited)::

    group,dept,searched,hit,search_basis,factors,timestamp,driver_age,driver_gender,is_state_patrol

Booleans are 0/1, ``factors`` is a semicolon-joined token list and
``timestamp`` is ISO-8601.  ``group``, ``factors``, ``timestamp``,
``driver_age`` and ``driver_gender`` may be empty.
"""

from __future__ import annotations

import csv
import enum
import io
import logging
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Iterable, TextIO

import numpy as np

from .model import CountsTable

logger = logging.getLogger(__name__)

COLUMNS = (
    "group",
    "dept",
    "searched",
    "hit",
    "search_basis",
    "factors",
    "timestamp",
    "driver_age",
    "driver_gender",
    "is_state_patrol",
)
COUNTS_COLUMNS = ("group", "dept", "n", "searches", "hits")
MAX_MALFORMED_RATE = 0.01
SMALL_SUBSET = 1000


class SchemaError(ValueError):
    """Header is missing required columns."""


class DataQualityError(ValueError):
    """Too many malformed rows."""


class EmptyResultError(ValueError):
    """A filtering step left no records."""


class SearchBasis(str, enum.Enum):
    PROBABLE_CAUSE = "probable_cause"
    PROTECTIVE_FRISK = "protective_frisk"
    CONSENT = "consent"
    INCIDENT_TO_ARREST = "incident_to_arrest"
    WARRANT = "warrant"
    NONE = "none"


class Factor(str, enum.Enum):
    ERRATIC_SUSPICIOUS_BEHAVIOR = "erratic_suspicious_behavior"
    OBSERVATION_OF_CONTRABAND = "observation_of_contraband"
    SUSPICIOUS_MOVEMENT = "suspicious_movement"
    INFORMANT_TIP = "informant_tip"
    WITNESS_OBSERVATION = "witness_observation"
    OTHER_OFFICIAL_INFO = "other_official_info"


@dataclass(frozen=True)
class StopRecord:
    group: str | None
    dept: str
    searched: bool
    hit: bool
    search_basis: SearchBasis = SearchBasis.NONE
    factors: frozenset = frozenset()
    timestamp: datetime | None = None
    driver_age: float | None = None
    driver_gender: str | None = None
    is_state_patrol: bool = False

    def __post_init__(self):
        if self.hit and not self.searched:
            raise ValueError("hit recorded without a search")
        if (self.search_basis is SearchBasis.NONE) == self.searched:
            raise ValueError("search_basis must be 'none' exactly when no search occurred")


@dataclass
class ParseReport:
    rows: int = 0
    parsed: int = 0
    malformed: list[tuple[int, str]] = field(default_factory=list)

    @property
    def malformed_rate(self) -> float:
        return len(self.malformed) / self.rows if self.rows else 0.0


def _parse_bool(s: str) -> bool:
    s = s.strip()
    if s == "1":
        return True
    if s == "0":
        return False
    raise ValueError(f"expected 0/1, got {s!r}")


def _parse_row(row: dict) -> StopRecord:
    dept = row["dept"].strip()
    if not dept:
        raise ValueError("empty dept")
    factors = frozenset(Factor(tok.strip()) for tok in row["factors"].split(";") if tok.strip())
    ts = row["timestamp"].strip()
    age = row["driver_age"].strip()
    return StopRecord(
        group=row["group"].strip() or None,
        dept=dept,
        searched=_parse_bool(row["searched"]),
        hit=_parse_bool(row["hit"]),
        search_basis=SearchBasis(row["search_basis"].strip() or "none"),
        factors=factors,
        timestamp=datetime.fromisoformat(ts) if ts else None,
        driver_age=float(age) if age else None,
        driver_gender=row["driver_gender"].strip() or None,
        is_state_patrol=_parse_bool(row["is_state_patrol"]),
    )


def parse_records(stream: TextIO | str) -> tuple[list[StopRecord], ParseReport]:
    """Parse stop records from CSV text.

    Malformed rows are skipped and reported with their line numbers.

    Raises
    ------
    SchemaError
        If the header lacks any documented column.
    DataQualityError
        If 1% or more of the data rows are malformed.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.DictReader(stream)
    header = reader.fieldnames or []
    missing = [c for c in COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    report = ParseReport()
    records = []
    for row in reader:
        report.rows += 1
        try:
            if None in row or any(row[c] is None for c in COLUMNS):
                raise ValueError("wrong number of fields")
            records.append(_parse_row(row))
        except (ValueError, KeyError) as exc:
            report.malformed.append((reader.line_num, str(exc)))
            logger.info("line %d: %s", reader.line_num, exc)
    report.parsed = len(records)
    if report.rows and report.malformed_rate >= MAX_MALFORMED_RATE:
        raise DataQualityError(
            f"{len(report.malformed)} of {report.rows} rows malformed "
            f"({100 * report.malformed_rate:.2f}% >= {100 * MAX_MALFORMED_RATE:.0f}%)"
        )
    return records, report


def read_records(path) -> tuple[list[StopRecord], ParseReport]:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_records(fh)


def write_records(records: Iterable[StopRecord], stream: TextIO) -> None:
    w = csv.writer(stream)
    w.writerow(COLUMNS)
    for r in records:
        w.writerow(
            [
                r.group or "",
                r.dept,
                int(r.searched),
                int(r.hit),
                r.search_basis.value,
                ";".join(sorted(f.value for f in r.factors)),
                r.timestamp.isoformat() if r.timestamp else "",
                "" if r.driver_age is None else f"{r.driver_age:g}",
                r.driver_gender or "",
                int(r.is_state_patrol),
            ]
        )


# ---------------------------------------------------------------------------
# filtering policy

ANY_SEARCH = "any_search"
PROBABLE_CAUSE_ONLY = "probable_cause_only"
PROBABLE_CAUSE_NO_OFFICIAL_INFO = "probable_cause_no_official_info"


@dataclass(frozen=True)
class FilterPolicy:
    """Which records to keep and what counts as a search.

    ``search_definition`` is one of ``"any_search"``,
    ``"probable_cause_only"``, ``"probable_cause_no_official_info"`` or a
    collection of :class:`SearchBasis` values to count as searches.
    """

    excluded_groups: frozenset = frozenset()
    drop_missing_group: bool = False
    exclude_state_patrol: bool = False
    top_k_departments: int | None = None
    search_definition: str | frozenset = ANY_SEARCH
    exclude_midnight: bool = False
    age_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "excluded_groups", frozenset(self.excluded_groups))
        if self.top_k_departments is not None and self.top_k_departments < 1:
            raise ValueError("top_k_departments must be >= 1")
        sd = self.search_definition
        if isinstance(sd, str):
            if sd not in (ANY_SEARCH, PROBABLE_CAUSE_ONLY, PROBABLE_CAUSE_NO_OFFICIAL_INFO):
                raise ValueError(f"unknown search definition {sd!r}")
        else:
            object.__setattr__(self, "search_definition", frozenset(SearchBasis(b) for b in sd))

    @classmethod
    def primary_analysis(cls) -> "FilterPolicy":
        """Exclusions for a primary analysis: major groups, municipal departments, top 100."""
        return cls(
            excluded_groups=frozenset({"native_american", "other"}),
            drop_missing_group=True,
            exclude_state_patrol=True,
            top_k_departments=100,
        )


@dataclass
class ExclusionReport:
    input_records: int
    removed: dict[str, int]
    redefined_searches: int
    output_records: int


def _counts_as_search(r: StopRecord, definition) -> bool:
    if not r.searched:
        return False
    if definition == ANY_SEARCH:
        return True
    if definition == PROBABLE_CAUSE_ONLY:
        return r.search_basis is SearchBasis.PROBABLE_CAUSE
    if definition == PROBABLE_CAUSE_NO_OFFICIAL_INFO:
        return r.search_basis is SearchBasis.PROBABLE_CAUSE and Factor.OTHER_OFFICIAL_INFO not in r.factors
    return r.search_basis in definition


def _is_midnight(ts: datetime | None) -> bool:
    return ts is not None and ts.hour == 0 and ts.minute == 0 and ts.second == 0 and ts.microsecond == 0


def apply_policy(records: list[StopRecord], policy: FilterPolicy) -> tuple[list[StopRecord], ExclusionReport]:
    """Apply exclusions in a fixed order and return the survivors.

    Order: groups, state patrol, top-k departments (ranked on what is left),
    search redefinition (rewrites flags, removes nothing), midnight, age.
    """
    n_in = len(records)
    removed = {}

    def step(name, keep):
        nonlocal records
        before = len(records)
        records = [r for r in records if keep(r)]
        removed[name] = before - len(records)

    step(
        "group",
        lambda r: r.group not in policy.excluded_groups and not (policy.drop_missing_group and r.group is None),
    )
    step("state_patrol", lambda r: not (policy.exclude_state_patrol and r.is_state_patrol))
    if policy.top_k_departments is not None:
        sizes = Counter(r.dept for r in records)
        ranked = sorted(sizes, key=lambda d: (-sizes[d], d))
        kept = set(ranked[: policy.top_k_departments])
        step("top_k_departments", lambda r: r.dept in kept)
    else:
        removed["top_k_departments"] = 0

    redefined = 0
    if policy.search_definition != ANY_SEARCH:
        out = []
        for r in records:
            if r.searched and not _counts_as_search(r, policy.search_definition):
                r = replace(r, searched=False, hit=False, search_basis=SearchBasis.NONE)
                redefined += 1
            out.append(r)
        records = out

    step("midnight", lambda r: not (policy.exclude_midnight and _is_midnight(r.timestamp)))
    if policy.age_bounds is not None:
        lo, hi = policy.age_bounds
        step("age", lambda r: r.driver_age is not None and lo <= r.driver_age <= hi)
    else:
        removed["age"] = 0

    if not records:
        raise EmptyResultError("no records survive the filtering policy")
    return records, ExclusionReport(n_in, removed, redefined, len(records))


# ---------------------------------------------------------------------------
# aggregation


def aggregate(records: Iterable[StopRecord], groups=None, depts=None) -> CountsTable:
    """Sum stops, searches and hits per (group, department) cell.

    Records without a group label are skipped.
    """
    acc = defaultdict(lambda: [0, 0, 0])
    for r in records:
        if r.group is None:
            continue
        c = acc[(r.group, r.dept)]
        c[0] += 1
        c[1] += r.searched
        c[2] += r.hit
    return CountsTable.from_cells(((g, d, *v) for (g, d), v in acc.items()), groups=groups, depts=depts)


def merge_counts(a: CountsTable, b: CountsTable) -> CountsTable:
    return CountsTable.from_cells(list(a.cells()) + list(b.cells()))


def write_counts(counts: CountsTable, stream: TextIO) -> None:
    w = csv.writer(stream)
    w.writerow(COUNTS_COLUMNS)
    for g, d, n, s, h in counts.cells():
        w.writerow([g, d, n, s, h])


def read_counts(stream: TextIO | str) -> CountsTable:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.DictReader(stream)
    missing = [c for c in COUNTS_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    cells = [(r["group"], r["dept"], int(r["n"]), int(r["searches"]), int(r["hits"])) for r in reader]
    return CountsTable.from_cells(cells)


# ---------------------------------------------------------------------------
# disaggregation and placebo relabeling

WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")
_SEASONS = {12: "winter", 1: "winter", 2: "winter", 3: "spring", 4: "spring", 5: "spring",
            6: "summer", 7: "summer", 8: "summer", 9: "fall", 10: "fall", 11: "fall"}


def _age_band(age):
    if age is None or age < 16 or age > 105:
        return None
    if age <= 25:
        return "16-25"
    if age <= 40:
        return "26-40"
    return "41-105"


def _time_of_day(ts):
    if ts is None or _is_midnight(ts):
        return None
    return "night" if ts.hour >= 20 or ts.hour < 5 else "day"


def disaggregate(records: Iterable[StopRecord], axis: str) -> dict[str, list[StopRecord]]:
    """Partition records by year, time of day, age band or gender.

    Records lacking the axis value are dropped, as are midnight timestamps
    for ``time_of_day`` and ages outside [16, 105] for ``age_band``.
    """
    keyfns = {
        "year": lambda r: str(r.timestamp.year) if r.timestamp else None,
        "time_of_day": lambda r: _time_of_day(r.timestamp),
        "age_band": lambda r: _age_band(r.driver_age),
        "gender": lambda r: r.driver_gender,
    }
    if axis not in keyfns:
        raise ValueError(f"unknown disaggregation axis {axis!r}")
    out: dict[str, list[StopRecord]] = defaultdict(list)
    for r in records:
        key = keyfns[axis](r)
        if key is not None:
            out[key].append(r)
    for key, subset in out.items():
        if len(subset) < SMALL_SUBSET:
            warnings.warn(f"subset {axis}={key} has only {len(subset)} records", stacklevel=2)
    return dict(sorted(out.items()))


def placebo_relabel(records: Iterable[StopRecord], axis: str) -> list[StopRecord]:
    """Replace each record's group with its weekday name or season."""
    if axis == "day_of_week":
        label = lambda ts: WEEKDAYS[ts.weekday()]  # noqa: E731
    elif axis == "season":
        label = lambda ts: _SEASONS[ts.month]  # noqa: E731
    else:
        raise ValueError(f"unknown placebo axis {axis!r}")
    out = []
    for r in records:
        if r.timestamp is None:
            raise ValueError("placebo relabeling needs a timestamp on every record")
        out.append(replace(r, group=label(r.timestamp)))
    return out


def count_records(records: Iterable[StopRecord]) -> tuple[int, int, int]:
    arr = np.array([(1, r.searched, r.hit) for r in records], dtype=np.int64).reshape(-1, 3)
    return tuple(int(x) for x in arr.sum(axis=0))
