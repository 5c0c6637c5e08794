"""Scraping, epoch collection and activity classification of target metrics.

A collection run first produces a *scrape log*: one record per scrape with the
raw exposition values (or ``None`` when the scrape failed). The log is turned
into per-interval data points by :func:`build_epoch`, a pure function, so a
persisted log can be replayed into an identical :class:`MetricEpoch`.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol

from .clock import Clock, SystemClock, sleep_until

log = logging.getLogger(__name__)

DEGRADED_MISSING_FRACTION = 0.05
INACTIVE_MISSING_FRACTION = 0.5


class MetricKind(str, Enum):
    COUNTER = "counter"
    GAUGE = "gauge"


class Activity(str, Enum):
    ACTIVE = "active"
    INACTIVE = "inactive"


class ScrapeError(Exception):
    pass


@dataclass(frozen=True)
class MetricPoint:
    metric_name: str
    timestamp: float
    value: float


@dataclass
class MetricSeries:
    name: str
    kind: MetricKind
    expected_points: int
    points: list[MetricPoint] = field(default_factory=list)

    @property
    def values(self) -> list[float]:
        return [p.value for p in self.points]

    @property
    def missing(self) -> int:
        return max(0, self.expected_points - len(self.points))

    @property
    def degraded(self) -> bool:
        return self.missing > DEGRADED_MISSING_FRACTION * self.expected_points


@dataclass
class MetricEpoch:
    target_id: str
    interval_seconds: int
    duration_seconds: int
    series: dict[str, MetricSeries] = field(default_factory=dict)

    @property
    def expected_points(self) -> int:
        return self.duration_seconds // self.interval_seconds

    def values(self, name: str) -> list[float]:
        s = self.series.get(name)
        return s.values if s is not None else []

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MetricEpoch):
            return NotImplemented
        return (
            self.target_id == other.target_id
            and self.interval_seconds == other.interval_seconds
            and self.duration_seconds == other.duration_seconds
            and self.series == other.series
        )


# --- exposition format ---------------------------------------------------

@dataclass
class Exposition:
    values: dict[str, float]
    kinds: dict[str, MetricKind]


_NAME = re.compile(r"[a-zA-Z_:][a-zA-Z0-9_:]*")
_LABEL = re.compile(r'\s*([a-zA-Z_][a-zA-Z0-9_]*)\s*=\s*"((?:[^"\\]|\\.)*)"\s*(,)?')
_TYPE_LINE = re.compile(r"#\s*TYPE\s+(\S+)\s+(\S+)")
_UNESCAPE = {"\\\\": "\\", '\\"': '"', "\\n": "\n"}
_TYPED_SUFFIXES = ("_total", "_count", "_sum", "_bucket", "_created")


def flatten_name(name: str, labels: Mapping[str, str]) -> str:
    """``name{b="2",a="1"}`` -> ``name.a.1.b.2`` (labels ordered by key)."""
    parts = [name]
    for key in sorted(labels):
        parts.append(key)
        parts.append(labels[key])
    return ".".join(parts)


def _parse_sample(line: str) -> tuple[str, dict[str, str], float]:
    m = _NAME.match(line)
    if not m:
        raise ValueError("no metric name")
    name = m.group(0)
    rest = line[m.end():]
    labels: dict[str, str] = {}
    if rest.startswith("{"):
        pos = 1
        while True:
            close = re.match(r"\s*\}", rest[pos:])
            if close:
                pos += close.end()
                break
            lm = _LABEL.match(rest, pos)
            if not lm:
                raise ValueError("bad label set")
            labels[lm.group(1)] = re.sub(r'\\[\\"n]', lambda e: _UNESCAPE[e.group(0)], lm.group(2))
            pos = lm.end()
            if lm.group(3) is None:
                close = re.match(r"\s*\}", rest[pos:])
                if not close:
                    raise ValueError("unterminated label set")
                pos += close.end()
                break
        rest = rest[pos:]
    fields = rest.split()
    if not fields or len(fields) > 2:
        raise ValueError("expected value [timestamp]")
    value = float(fields[0])
    return name, labels, value


def _declared_kind(name: str, declared: Mapping[str, str]) -> MetricKind | None:
    candidates = [(name, "")]
    for suffix in _TYPED_SUFFIXES:
        if name.endswith(suffix):
            candidates.append((name[: -len(suffix)], suffix))
    for stem, suffix in candidates:
        kind = declared.get(stem)
        if kind is None:
            continue
        if kind == "counter":
            return MetricKind.COUNTER
        if kind == "gauge":
            return MetricKind.GAUGE if not suffix else None
        if kind in ("histogram", "summary"):
            return MetricKind.COUNTER if suffix in ("_count", "_sum", "_bucket") else MetricKind.GAUGE
    return None


def parse_exposition(text: str) -> Exposition:
    """Parse a Prometheus text-format body. Unparseable lines are skipped."""
    declared: dict[str, str] = {}
    samples: list[tuple[str, str]] = []
    values: dict[str, float] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tm = _TYPE_LINE.match(line)
            if tm:
                declared[tm.group(1)] = tm.group(2).lower()
            continue
        try:
            name, labels, value = _parse_sample(line)
        except ValueError:
            log.debug("skipping unparseable exposition line %r", raw)
            continue
        if not math.isfinite(value):
            continue
        flat = flatten_name(name, labels)
        values[flat] = value
        samples.append((flat, name))
    kinds = {}
    for flat, name in samples:
        kind = _declared_kind(name, declared)
        if kind is not None:
            kinds[flat] = kind
    return Exposition(values, kinds)


class MetricSource(Protocol):
    def scrape(self) -> Exposition: ...


class HttpMetricSource:
    def __init__(self, url: str, timeout: float = 2.0):
        self.url = url
        self.timeout = timeout

    def scrape(self) -> Exposition:
        try:
            with urllib.request.urlopen(self.url, timeout=self.timeout) as resp:
                body = resp.read().decode("utf-8", errors="replace")
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ScrapeError(f"{self.url}: {exc}") from exc
        return parse_exposition(body)

    def __repr__(self) -> str:
        return f"HttpMetricSource({self.url!r})"


def scrape_once(endpoint: str, timeout: float = 2.0) -> dict[str, float]:
    return HttpMetricSource(endpoint, timeout).scrape().values


# --- scrape logs and epochs -----------------------------------------------

@dataclass(frozen=True)
class ScrapeRecord:
    timestamp: float
    values: dict[str, float] | None
    kinds: dict[str, MetricKind] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "t": self.timestamp,
            "values": self.values,
            "kinds": {k: v.value for k, v in self.kinds.items()},
        }

    @classmethod
    def from_json(cls, d: dict) -> "ScrapeRecord":
        return cls(
            d["t"],
            None if d["values"] is None else {k: float(v) for k, v in d["values"].items()},
            {k: MetricKind(v) for k, v in d.get("kinds", {}).items()},
        )


def _as_source(endpoint: str | MetricSource) -> MetricSource:
    return HttpMetricSource(endpoint) if isinstance(endpoint, str) else endpoint


def record_scrapes(
    source: str | MetricSource,
    interval_seconds: float,
    duration_seconds: float,
    clock: Clock | None = None,
    interrupt: Callable[[], bool] | None = None,
    poll_seconds: float = 0.1,
) -> list[ScrapeRecord]:
    """Scrape once at the start and then at the end of every interval.

    Scrapes are aligned to ``start + k * interval``. When ``interrupt`` fires
    the log collected so far is returned.
    """
    src = _as_source(source)
    clock = clock or SystemClock()
    n = int(round(duration_seconds / interval_seconds))
    start = clock.now()
    out = [_scrape(src, clock)]
    for k in range(1, n + 1):
        if not sleep_until(clock, start + k * interval_seconds, interrupt, poll_seconds):
            break
        out.append(_scrape(src, clock))
    return out


def _scrape(src: MetricSource, clock: Clock) -> ScrapeRecord:
    t = clock.now()
    try:
        exp = src.scrape()
    except ScrapeError as exc:
        log.warning("scrape failed: %s", exc)
        return ScrapeRecord(t, None)
    return ScrapeRecord(t, exp.values, exp.kinds)


def infer_kinds(records: Iterable[ScrapeRecord]) -> dict[str, MetricKind]:
    """Declared ``# TYPE`` wins; otherwise monotone non-decreasing means counter."""
    declared: dict[str, MetricKind] = {}
    raw: dict[str, list[float]] = {}
    for rec in records:
        declared.update(rec.kinds)
        if rec.values is None:
            continue
        for name, v in rec.values.items():
            raw.setdefault(name, []).append(v)
    kinds = {}
    for name, vs in raw.items():
        if name in declared:
            kinds[name] = declared[name]
        else:
            monotone = all(b >= a for a, b in zip(vs, vs[1:]))
            kinds[name] = MetricKind.COUNTER if monotone else MetricKind.GAUGE
    return kinds


def build_series(
    records: list[ScrapeRecord],
    interval_seconds: float,
    expected_points: int,
    kinds: Mapping[str, MetricKind] | None = None,
) -> dict[str, MetricSeries]:
    """Per-interval data points from a scrape log (first record is the baseline).

    Counters become ``delta / interval`` rates; a negative delta (counter
    reset) or a missing neighbour scrape yields a missing point. Gauges are
    passed through. Missing points are skipped, never interpolated.
    """
    resolved = infer_kinds(records)
    if kinds:
        resolved.update({k: v for k, v in kinds.items() if k in resolved})
    series = {name: MetricSeries(name, kind, expected_points) for name, kind in resolved.items()}
    for prev, cur in zip(records, records[1:]):
        if cur.values is None:
            continue
        for name, value in cur.values.items():
            s = series[name]
            if s.kind is MetricKind.GAUGE:
                s.points.append(MetricPoint(name, cur.timestamp, value))
                continue
            if prev.values is None or name not in prev.values:
                continue
            delta = value - prev.values[name]
            if delta < 0:
                continue
            s.points.append(MetricPoint(name, cur.timestamp, delta / interval_seconds))
    return series


def build_epoch(
    records: list[ScrapeRecord],
    target_id: str,
    interval_seconds: int,
    duration_seconds: int,
    kinds: Mapping[str, MetricKind] | None = None,
) -> MetricEpoch:
    epoch = MetricEpoch(target_id, interval_seconds, duration_seconds)
    epoch.series = build_series(records, interval_seconds, epoch.expected_points, kinds)
    for s in epoch.series.values():
        if s.degraded:
            log.warning("metric %s degraded: %d of %d points missing", s.name, s.missing, s.expected_points)
    return epoch


def collect_epoch(
    endpoint: str | MetricSource,
    interval_seconds: int,
    duration_seconds: int,
    clock: Clock | None = None,
    *,
    target_id: str = "target",
    store: "EpochStore | None" = None,
    index: int | None = None,
) -> MetricEpoch:
    """Collect one monitoring epoch; optionally persist it and its scrape log."""
    if interval_seconds < 1:
        raise ValueError("interval must be at least 1 second")
    if duration_seconds % interval_seconds:
        raise ValueError(f"interval {interval_seconds}s does not divide duration {duration_seconds}s")
    records = record_scrapes(endpoint, interval_seconds, duration_seconds, clock)
    epoch = build_epoch(records, target_id, interval_seconds, duration_seconds)
    if store is not None:
        n = index if index is not None else store.next_index(target_id)
        store.save_scrape_log(target_id, n, records)
        store.save_epoch(epoch, n)
    return epoch


def classify_series(series: MetricSeries) -> Activity:
    if series.missing > INACTIVE_MISSING_FRACTION * series.expected_points:
        return Activity.INACTIVE
    values = series.values
    if not values or all(v == values[0] for v in values):
        return Activity.INACTIVE
    return Activity.ACTIVE


def classify_activity(epoch: MetricEpoch) -> dict[str, Activity]:
    return {name: classify_series(s) for name, s in epoch.series.items()}


# --- persistence -------------------------------------------------------------

class EpochStore:
    """Epoch files under ``<data_dir>/<target_id>/``.

    ``epoch-<n>.ndjson`` holds a header line followed by one
    ``{"t", "metric", "value"}`` record per point; ``epoch-<n>.scrapes.ndjson``
    holds the raw scrape log. Files are written append-only by one writer;
    readers ignore a trailing partial line.
    """

    def __init__(self, data_dir: str | os.PathLike):
        self.root = Path(data_dir)

    def target_dir(self, target_id: str) -> Path:
        d = self.root / target_id
        d.mkdir(parents=True, exist_ok=True)
        return d

    def epoch_path(self, target_id: str, index: int) -> Path:
        return self.target_dir(target_id) / f"epoch-{index}.ndjson"

    def scrape_log_path(self, target_id: str, index: int) -> Path:
        return self.target_dir(target_id) / f"epoch-{index}.scrapes.ndjson"

    def next_index(self, target_id: str) -> int:
        n = 1
        while self.epoch_path(target_id, n).exists():
            n += 1
        return n

    def save_epoch(self, epoch: MetricEpoch, index: int) -> Path:
        path = self.epoch_path(epoch.target_id, index)
        header = {
            "type": "epoch",
            "target_id": epoch.target_id,
            "interval_seconds": epoch.interval_seconds,
            "duration_seconds": epoch.duration_seconds,
            "kinds": {n: s.kind.value for n, s in sorted(epoch.series.items())},
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for name in sorted(epoch.series):
                for p in epoch.series[name].points:
                    fh.write(json.dumps({"t": p.timestamp, "metric": name, "value": p.value}) + "\n")
        return path

    def save_scrape_log(self, target_id: str, index: int, records: list[ScrapeRecord]) -> Path:
        path = self.scrape_log_path(target_id, index)
        with open(path, "w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_json()) + "\n")
        return path

    def load_scrape_log(self, target_id: str, index: int) -> list[ScrapeRecord]:
        return [ScrapeRecord.from_json(d) for d in _read_ndjson(self.scrape_log_path(target_id, index))]

    def load_epoch(self, target_id: str, index: int) -> MetricEpoch:
        return load_epoch_file(self.epoch_path(target_id, index))


def _read_ndjson(path: Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.endswith("\n"):
                break
            out.append(json.loads(line))
    return out


def load_epoch_file(path: str | os.PathLike) -> MetricEpoch:
    rows = _read_ndjson(Path(path))
    if not rows or rows[0].get("type") != "epoch":
        raise ValueError(f"{path}: missing epoch header")
    head = rows[0]
    epoch = MetricEpoch(head["target_id"], head["interval_seconds"], head["duration_seconds"])
    for name, kind in head["kinds"].items():
        epoch.series[name] = MetricSeries(name, MetricKind(kind), epoch.expected_points)
    for row in rows[1:]:
        name = row["metric"]
        epoch.series[name].points.append(MetricPoint(name, row["t"], row["value"]))
    return epoch
