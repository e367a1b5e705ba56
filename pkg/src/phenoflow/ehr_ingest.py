"""Episodic observation files: parsing, cohort inclusion and code grouping.

Two record kinds are supported. Event files hold one ``record_id<TAB>variable_id<TAB>time``
line per coded event; value files add a fourth ``value`` column. Times are
fractional years.
"""

from __future__ import annotations

import logging
import math
import operator
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_SPAN_YEARS = 1.0 / 365.0

DEFAULT_LAB_THRESHOLDS = (
    ("AST", ">", 40.0),
    ("ALT", ">", 55.0),
    ("ALK_PHOS", ">", 150.0),
)
DEFAULT_INCLUSION_CODES = frozenset({"571.8", "571.9", "571.5"})

_OPERATORS = {
    ">": operator.gt,
    ">=": operator.ge,
    "<": operator.lt,
    "<=": operator.le,
}


class ParseError(ValueError):
    """Raised for unreadable files, or malformed lines in strict mode."""

    def __init__(self, message: str, path=None, lineno: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if lineno is not None:
                where += f":{lineno}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True, eq=False)
class EventSeries:
    record_id: str
    variable_id: str
    times: np.ndarray

    def __post_init__(self):
        times = np.sort(np.asarray(self.times, dtype=np.float64), kind="stable")
        if not np.all(np.isfinite(times)):
            raise ValueError(f"non-finite event time in {self.record_id}/{self.variable_id}")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True, eq=False)
class ValueSeries:
    record_id: str
    variable_id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError("times and values must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError(f"non-finite observation in {self.record_id}/{self.variable_id}")
        order = np.argsort(times, kind="stable")
        times, values = times[order], values[order]
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.times)


@dataclass(frozen=True)
class RecordSpan:
    record_id: str
    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start

    def contains(self, t) -> bool:
        t = np.asarray(t)
        return bool(np.all((t >= self.start) & (t <= self.end)))


@dataclass
class ParsedObservations:
    """Series parsed from one file plus line-level bookkeeping."""

    series: list
    n_parsed: int = 0
    errors: list = field(default_factory=list)

    @property
    def n_rejected(self) -> int:
        return len(self.errors)


def _validate_id(text: str, what: str) -> str:
    if not text or any(c in text for c in "\t\n\r|"):
        raise ValueError(f"invalid {what} {text!r}")
    return text


def _parse_float(text: str, what: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise ValueError(f"{what} field {text!r} is not a number") from None
    if not math.isfinite(x):
        raise ValueError(f"{what} field {text!r} is not finite")
    return x


def parse_observations(path, kind: str, strict: bool = False) -> ParsedObservations:
    """Parse an event or value file into one series per (record, variable).

    Parameters
    ----------
    path : path-like
        Tab-separated observation file.
    kind : {"event", "value"}
        Event lines carry 3 fields, value lines 4.
    strict : bool
        Abort on the first malformed line instead of skipping it.

    Returns
    -------
    ParsedObservations
        Series sorted by (record_id, variable_id); ``errors`` lists
        ``(line_number, message)`` for every rejected line.
    """
    if kind not in ("event", "value"):
        raise ValueError(f"kind must be 'event' or 'value', got {kind!r}")
    n_fields = 3 if kind == "event" else 4
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError("file not found", path) from None
    except (UnicodeDecodeError, IsADirectoryError, PermissionError) as exc:
        raise ParseError(f"cannot read file ({exc.__class__.__name__})", path) from None

    times = defaultdict(list)
    values = defaultdict(list)
    result = ParsedObservations(series=[])
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        try:
            if len(parts) != n_fields:
                raise ValueError(f"expected {n_fields} tab-separated fields, got {len(parts)}")
            rid = _validate_id(parts[0].strip(), "record_id")
            vid = _validate_id(parts[1].strip(), "variable_id")
            t = _parse_float(parts[2].strip(), "time")
            v = _parse_float(parts[3].strip(), "value") if kind == "value" else None
        except ValueError as exc:
            if strict:
                raise ParseError(str(exc), path, lineno) from None
            result.errors.append((lineno, str(exc)))
            continue
        times[rid, vid].append(t)
        if v is not None:
            values[rid, vid].append(v)
        result.n_parsed += 1

    for key in sorted(times):
        if kind == "event":
            result.series.append(EventSeries(key[0], key[1], times[key]))
        else:
            result.series.append(ValueSeries(key[0], key[1], times[key], values[key]))
    log.info("%s: parsed %d lines into %d series, rejected %d",
             path, result.n_parsed, len(result.series), result.n_rejected)
    return result


def write_events(path, series: Iterable[EventSeries]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in series:
            for t in s.times:
                fh.write(f"{s.record_id}\t{s.variable_id}\t{float(t)!r}\n")


def write_values(path, series: Iterable[ValueSeries]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in series:
            for t, v in zip(s.times, s.values):
                fh.write(f"{s.record_id}\t{s.variable_id}\t{float(t)!r}\t{float(v)!r}\n")


def load_code_map(path) -> dict[str, str]:
    """Read a two-column ``raw_code<TAB>group_id`` file."""
    mapping = {}
    path = Path(path)
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError("expected 2 tab-separated fields", path, lineno)
        raw, group = parts[0].strip(), parts[1].strip()
        if raw in mapping and mapping[raw] != group:
            raise ParseError(f"code {raw!r} mapped to both {mapping[raw]!r} and {group!r}",
                             path, lineno)
        mapping[raw] = group
    return mapping


def apply_inclusion_criteria(
    events: Sequence[EventSeries],
    values: Sequence[ValueSeries],
    lab_thresholds=DEFAULT_LAB_THRESHOLDS,
    code_set=DEFAULT_INCLUSION_CODES,
) -> list[str]:
    """Return sorted ids of records meeting any lab threshold or carrying any listed code.

    ``lab_thresholds`` holds ``(variable_id, operator, value)`` triples with
    operator one of ``> >= < <=``.
    """
    by_lab = defaultdict(list)
    for var, op, bound in lab_thresholds:
        if op not in _OPERATORS:
            raise ValueError(f"unknown comparison operator {op!r}")
        by_lab[var].append((_OPERATORS[op], float(bound)))
    code_set = set(code_set)

    included = set()
    for s in events:
        if s.variable_id in code_set and len(s.times) > 0:
            included.add(s.record_id)
    for s in values:
        if s.record_id in included:
            continue
        for cmp, bound in by_lab.get(s.variable_id, ()):
            if np.any(cmp(s.values, bound)):
                included.add(s.record_id)
                break
    return sorted(included)


def group_codes(
    events: Sequence[EventSeries],
    mapping: Mapping[str, str],
    drop_unmapped: bool = False,
) -> list[EventSeries]:
    """Merge event series whose raw codes map to the same group id.

    Unmapped codes pass through as their own variable unless ``drop_unmapped``.
    """
    merged = defaultdict(list)
    unmapped = set()
    for s in events:
        group = mapping.get(s.variable_id)
        if group is None:
            unmapped.add(s.variable_id)
            if drop_unmapped:
                continue
            group = s.variable_id
        merged[s.record_id, group].append(s.times)
    if unmapped:
        log.info("%d codes not in group map (%s): %s", len(unmapped),
                 "dropped" if drop_unmapped else "kept as-is",
                 ", ".join(sorted(unmapped)[:10]))
    return [EventSeries(rid, gid, np.concatenate(merged[rid, gid]))
            for rid, gid in sorted(merged)]


def compute_record_span(series: Iterable) -> RecordSpan:
    """Span from the earliest to the latest timestamp across a record's series."""
    record_id = None
    lo, hi = math.inf, -math.inf
    for s in series:
        if record_id is None:
            record_id = s.record_id
        elif s.record_id != record_id:
            raise ValueError(f"series from records {record_id!r} and {s.record_id!r} mixed")
        if len(s.times):
            lo = min(lo, float(s.times[0]))
            hi = max(hi, float(s.times[-1]))
    if not math.isfinite(lo):
        raise ValueError(f"record {record_id!r} has no observations")
    if hi - lo < MIN_SPAN_YEARS:
        hi = lo + MIN_SPAN_YEARS
    return RecordSpan(record_id, lo, hi)


def group_by_record(*series_lists) -> dict[str, list]:
    """Collect series from any number of lists into ``record_id -> [series...]``."""
    out = defaultdict(list)
    for series in series_lists:
        for s in series:
            out[s.record_id].append(s)
    return dict(out)


def record_spans(events, values) -> dict[str, RecordSpan]:
    return {rid: compute_record_span(ss)
            for rid, ss in sorted(group_by_record(events, values).items())}


def observation_counts(events, values) -> dict[str, int]:
    counts = defaultdict(int)
    for s in list(events) + list(values):
        counts[s.record_id] += len(s)
    return dict(counts)


def earliest_code_times(events: Iterable[EventSeries], code_set) -> dict[str, float]:
    """Earliest occurrence of any code in ``code_set`` per record (records without one omitted)."""
    code_set = set(code_set)
    first = {}
    for s in events:
        if s.variable_id in code_set and len(s.times):
            t = float(s.times[0])
            if t < first.get(s.record_id, math.inf):
                first[s.record_id] = t
    return first


def filter_records(series: Iterable, keep) -> list:
    keep = set(keep)
    return [s for s in series if s.record_id in keep]
