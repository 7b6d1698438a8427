"""Versioned time-series and line-list storage with as-of semantics.

Every datum carries the day it was published (its issue date).  A
computation pinned to nowcast date t may only see entries issued on or
before t; the as-of accessors below are the single gate through which all
downstream modules read data, so rewinding the clock is just a matter of
passing a smaller t.

Dates are integer day indexes (days since a configurable epoch) so that
all core arithmetic is plain integer arithmetic.
"""

from __future__ import annotations

import csv
import datetime
import io
import json
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .errors import ConflictError, FetchError, ParseError, ValidationError

DEFAULT_EPOCH = datetime.date(2020, 1, 1)

RATE_SCALE = 100_000.0  # rates are counts per 100,000 persons


def day_index(d, epoch=DEFAULT_EPOCH):
    """Convert an ISO date string or datetime.date to an integer day index."""
    if isinstance(d, str):
        d = datetime.date.fromisoformat(d)
    return (d - epoch).days


def index_date(i, epoch=DEFAULT_EPOCH):
    """Convert an integer day index back to a datetime.date."""
    return epoch + datetime.timedelta(days=int(i))


@dataclass
class GeoCatalog:
    """Locations, populations, and the county -> state hierarchy."""

    locations: list[str]
    population: dict[str, float]
    parent: dict[str, str]  # county -> state; states are absent

    def __post_init__(self):
        for loc in self.locations:
            if self.population.get(loc, 0) <= 0:
                raise ValidationError(f"population must be positive for {loc!r}")
        for county, state in self.parent.items():
            if state not in self.locations:
                raise ValidationError(f"parent state {state!r} of {county!r} unknown")

    def is_state(self, loc):
        return loc not in self.parent

    def state_of(self, loc):
        return self.parent.get(loc, loc)

    def state_members(self, state):
        """All locations in a state, the state itself included."""
        return [loc for loc in self.locations if self.state_of(loc) == state]

    @classmethod
    def from_csv(cls, path):
        locations, population, parent = [], {}, {}
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            _require_columns(reader, {"location", "population", "parent"}, path)
            for lineno, row in enumerate(reader, start=2):
                loc = row["location"].strip()
                try:
                    pop = float(row["population"])
                except ValueError:
                    raise ParseError(f"bad population {row['population']!r}", line=lineno)
                locations.append(loc)
                population[loc] = pop
                if row["parent"].strip():
                    parent[loc] = row["parent"].strip()
        return cls(locations, population, parent)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["location", "population", "parent"])
            for loc in self.locations:
                w.writerow([loc, f"{self.population[loc]:g}", self.parent.get(loc, "")])


@dataclass
class VersionedSeries:
    """Versioned (location, reference_date, issue_date) -> value triples.

    ``values`` may hold None for explicitly-missing issues (indicator
    signals publish missingness).  ``scale`` maps a location to the factor
    that converts stored raw values to rates per 100k; it is the identity
    for signals that are already on their natural scale.
    """

    signal: str = "value"
    epoch: datetime.date = DEFAULT_EPOCH
    entries: dict = field(default_factory=dict)  # (loc, ref, issue) -> value | None
    scale: dict = field(default_factory=dict)  # loc -> rate conversion factor

    def add(self, location, reference_date, issue_date, value):
        if issue_date < reference_date:
            raise ValidationError(
                f"issue date {issue_date} precedes reference date {reference_date} "
                f"for {location!r}"
            )
        key = (location, int(reference_date), int(issue_date))
        if key in self.entries:
            raise ConflictError(f"duplicate entry for {key}")
        self.entries[key] = value

    def locations(self):
        return sorted({loc for (loc, _, _) in self.entries})

    def __len__(self):
        return len(self.entries)

    def as_of(self, t, location, as_rate=True):
        """Snapshot {reference_date: value} visible at day t for a location.

        For each reference date the entry with the largest issue date <= t
        wins; explicitly-missing latest issues drop the reference date.
        """
        best = {}
        for (loc, ref, issue), value in self.entries.items():
            if loc != location or issue > t:
                continue
            prev = best.get(ref)
            if prev is None or issue > prev[0]:
                best[ref] = (issue, value)
        factor = self.scale.get(location, 1.0) if as_rate else 1.0
        return {
            ref: value * factor
            for ref, (issue, value) in best.items()
            if value is not None
        }

    def visible_keys(self, t):
        """(location, reference, issue) triples visible at day t."""
        return {key for key in self.entries if key[2] <= t}

    def to_csv(self, path):
        """Export raw rows (counts untouched), one per versioned entry."""
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            if self.signal == "value":
                w.writerow(["location", "reference_date", "issue_date", "value"])
            else:
                w.writerow(["location", "reference_date", "issue_date", "signal", "value"])
            for (loc, ref, issue) in sorted(self.entries):
                value = self.entries[(loc, ref, issue)]
                sval = "" if value is None else f"{value:.10g}"
                row = [loc, index_date(ref, self.epoch).isoformat(),
                       index_date(issue, self.epoch).isoformat()]
                if self.signal != "value":
                    row.append(self.signal)
                row.append(sval)
                w.writerow(row)


@dataclass
class LineList:
    """Patient-level (onset date, report date) pairs.

    Zero-delay records are retained here; estimation code excludes them.
    """

    onset: np.ndarray  # int day indexes
    report: np.ndarray
    source: str = ""
    epoch: datetime.date = DEFAULT_EPOCH

    def __post_init__(self):
        self.onset = np.asarray(self.onset, dtype=np.int64)
        self.report = np.asarray(self.report, dtype=np.int64)
        if self.onset.shape != self.report.shape:
            raise ValidationError("onset and report arrays differ in length")
        if np.any(self.report < self.onset):
            raise ValidationError("line list contains report date before onset date")

    def __len__(self):
        return len(self.onset)

    @property
    def lags(self):
        return self.report - self.onset

    def as_of(self, t):
        """Records reported strictly before day t."""
        keep = self.report < t
        return LineList(self.onset[keep], self.report[keep], self.source, self.epoch)

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["onset_date", "report_date"])
            for a, b in zip(self.onset, self.report):
                w.writerow([index_date(a, self.epoch).isoformat(),
                            index_date(b, self.epoch).isoformat()])


def linelist_as_of(ll, t):
    """Records of ``ll`` with report date strictly before day t."""
    return ll.as_of(t)


def as_of(series, t, location, as_rate=True):
    """Functional alias for VersionedSeries.as_of."""
    return series.as_of(t, location, as_rate=as_rate)


def _require_columns(reader, required, path):
    have = set(reader.fieldnames or [])
    if not required.issubset(have):
        raise ParseError(f"{path}: expected columns {sorted(required)}, got {sorted(have)}", line=1)


def _parse_date(text, epoch, lineno):
    try:
        return day_index(text.strip(), epoch)
    except ValueError:
        raise ParseError(f"bad date {text!r}", line=lineno)


def ingest_csv(path, kind, geo=None, epoch=DEFAULT_EPOCH):
    """Load a CSV archive file.

    kind='cases'     -> VersionedSeries of counts; rates derived via ``geo``
                        populations (geo required).
    kind='indicator' -> dict {signal: VersionedSeries}; empty value = missing.
    kind='linelist'  -> LineList.
    """
    if kind == "cases":
        return _ingest_cases(path, geo, epoch)
    if kind == "indicator":
        return _ingest_indicator(path, epoch)
    if kind == "linelist":
        return _ingest_linelist(path, epoch)
    raise ValueError(f"unknown kind {kind!r}")


def _ingest_cases(path, geo, epoch):
    if geo is None:
        raise ValidationError("cases ingestion needs a GeoCatalog for rate conversion")
    series = VersionedSeries(signal="value", epoch=epoch)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        _require_columns(reader, {"location", "reference_date", "issue_date", "value"}, path)
        for lineno, row in enumerate(reader, start=2):
            loc = row["location"].strip()
            ref = _parse_date(row["reference_date"], epoch, lineno)
            issue = _parse_date(row["issue_date"], epoch, lineno)
            try:
                value = float(row["value"])
            except ValueError:
                raise ParseError(f"bad value {row['value']!r}", line=lineno)
            if value < 0:
                raise ParseError(f"negative case count {value}", line=lineno)
            if loc not in geo.population:
                raise ParseError(f"unknown location {loc!r}", line=lineno)
            series.add(loc, ref, issue, value)
    for loc in geo.locations:
        series.scale[loc] = RATE_SCALE / geo.population[loc]
    return series


def _ingest_indicator(path, epoch):
    out = {}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        _require_columns(
            reader, {"location", "reference_date", "issue_date", "signal", "value"}, path
        )
        for lineno, row in enumerate(reader, start=2):
            loc = row["location"].strip()
            ref = _parse_date(row["reference_date"], epoch, lineno)
            issue = _parse_date(row["issue_date"], epoch, lineno)
            signal = row["signal"].strip()
            raw = row["value"].strip()
            if raw == "":
                value = None
            else:
                try:
                    value = float(raw)
                except ValueError:
                    raise ParseError(f"bad value {row['value']!r}", line=lineno)
            series = out.setdefault(signal, VersionedSeries(signal=signal, epoch=epoch))
            series.add(loc, ref, issue, value)
    return out


def _ingest_linelist(path, epoch):
    onsets, reports = [], []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        _require_columns(reader, {"onset_date", "report_date"}, path)
        for lineno, row in enumerate(reader, start=2):
            a = _parse_date(row["onset_date"], epoch, lineno)
            b = _parse_date(row["report_date"], epoch, lineno)
            if b < a:
                raise ValidationError(f"line {lineno}: report date precedes onset date")
            onsets.append(a)
            reports.append(b)
    return LineList(np.array(onsets, dtype=np.int64), np.array(reports, dtype=np.int64),
                    source=str(path), epoch=epoch)


def _default_transport(url, timeout=30.0):
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as e:
        return e.code, b""
    except urllib.error.URLError as e:
        raise FetchError(f"transport failure for {url}: {e}") from e


def fetch_remote(endpoint, signal, geo, as_of_day, epoch=DEFAULT_EPOCH, transport=None):
    """Fetch a versioned series from an HTTP API serving JSON rows.

    The endpoint is queried as ``?signal=S&geo_value=G&as_of=YYYY-MM-DD`` and
    must return a JSON list of objects with keys geo_value, time_value,
    issue, value (dates ISO-8601).  ``transport`` may be injected for
    offline tests; it maps url -> (status, body bytes).
    """
    transport = transport or _default_transport
    query = urllib.parse.urlencode(
        {"signal": signal, "geo_value": geo, "as_of": index_date(as_of_day, epoch).isoformat()}
    )
    url = f"{endpoint}?{query}"
    status, body = transport(url)
    if status != 200:
        raise FetchError(f"GET {url} returned status {status}")
    try:
        rows = json.loads(body)
    except json.JSONDecodeError as e:
        raise ParseError(f"response to {url} is not valid JSON: {e}")
    series = VersionedSeries(signal=signal, epoch=epoch)
    for i, row in enumerate(rows):
        try:
            loc = row["geo_value"]
            ref = day_index(row["time_value"], epoch)
            issue = day_index(row["issue"], epoch)
            value = None if row["value"] is None else float(row["value"])
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"row {i} malformed ({e!r}): {row!r}")
        series.add(loc, ref, issue, value)
    return series


@dataclass
class Archive:
    """Bundle of everything a pipeline run reads: cases, indicators,
    line list, and geography.  Immutable after construction by convention."""

    cases: VersionedSeries
    indicators: dict
    linelist: LineList
    geo: GeoCatalog

    @classmethod
    def from_dir(cls, directory, epoch=DEFAULT_EPOCH):
        from pathlib import Path

        directory = Path(directory)
        geo = GeoCatalog.from_csv(directory / "geo.csv")
        cases = ingest_csv(directory / "cases.csv", "cases", geo=geo, epoch=epoch)
        indicators = {}
        ind_path = directory / "indicators.csv"
        if ind_path.exists():
            indicators = ingest_csv(ind_path, "indicator", epoch=epoch)
        linelist = ingest_csv(directory / "linelist.csv", "linelist", epoch=epoch)
        return cls(cases, indicators, linelist, geo)


class AccessAudit:
    """Records every as-of read against a pipeline clock.

    The pipeline sets ``clock`` to the nowcast date before working on it;
    any data access pinned to a later day is recorded as a violation.
    """

    def __init__(self):
        self.clock = None
        self.violations = []
        self.reads = 0

    def record(self, query_t, max_issue):
        self.reads += 1
        if self.clock is not None and query_t > self.clock:
            self.violations.append(("query-after-clock", query_t, self.clock))
        if max_issue is not None and max_issue > query_t:
            self.violations.append(("issue-after-query", max_issue, query_t))


class AuditedArchive:
    """Archive wrapper that routes reads through an AccessAudit."""

    def __init__(self, archive, audit):
        self._archive = archive
        self.audit = audit
        self.geo = archive.geo

    @property
    def indicators(self):
        return {name: _AuditedSeries(s, self.audit) for name, s in self._archive.indicators.items()}

    @property
    def cases(self):
        return _AuditedSeries(self._archive.cases, self.audit)

    @property
    def linelist(self):
        return _AuditedLineList(self._archive.linelist, self.audit)


class _AuditedSeries:
    def __init__(self, series, audit):
        self._series = series
        self._audit = audit

    def __getattr__(self, name):
        return getattr(self._series, name)

    def as_of(self, t, location, as_rate=True):
        snap = self._series.as_of(t, location, as_rate=as_rate)
        issues = [
            issue
            for (loc, ref, issue) in self._series.entries
            if loc == location and issue <= t
        ]
        self._audit.record(t, max(issues) if issues else None)
        return snap


class _AuditedLineList:
    def __init__(self, ll, audit):
        self._ll = ll
        self._audit = audit

    def __getattr__(self, name):
        return getattr(self._ll, name)

    def __len__(self):
        return len(self._ll)

    def as_of(self, t):
        out = self._ll.as_of(t)
        self._audit.record(t, int(out.report.max()) + 1 if len(out) else None)
        return out
