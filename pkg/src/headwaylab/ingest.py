"""Parse, window-filter and normalize raw AVL measurements.

Input is delimiter-separated text with one vehicle report per row (vehicle id,
planar x, planar y, timestamp).  Rows are grouped per vehicle and sorted by
time; everything downstream works on these per-vehicle chronological traces.
Coordinates are treated as an arbitrary consistent planar frame: the pipeline
is shift- and uniform-scale-invariant, so no datum conversion happens here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Iterable


class IngestError(ValueError):
    pass


class DegenerateExtentError(IngestError):
    """All points coincide; no coordinate frame can be derived."""


@dataclass(frozen=True)
class AvlRecord:
    vehicle_id: str
    x: float
    y: float
    t: int


@dataclass
class TraceSet:
    """Per-vehicle, time-sorted AVL records.

    Each sequence is strictly increasing in t; duplicate timestamps for a
    vehicle are resolved at parse time (later row wins).
    """

    traces: dict[str, list[AvlRecord]] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(v) for v in self.traces.values())

    def vehicles(self) -> list[str]:
        return sorted(self.traces)

    def all_records(self) -> Iterable[AvlRecord]:
        for vid in self.vehicles():
            yield from self.traces[vid]

    def validate(self) -> None:
        for vid, recs in self.traces.items():
            for a, b in zip(recs, recs[1:]):
                if b.t <= a.t:
                    raise IngestError(f"trace {vid} not strictly increasing at t={b.t}")


@dataclass(frozen=True)
class TimeWindow:
    daily_start: int
    daily_end: int
    weekdays: frozenset[int] = frozenset(range(7))  # Monday=0 .. Sunday=6

    def __post_init__(self):
        if not (0 <= self.daily_start < self.daily_end <= 86400):
            raise IngestError("require 0 <= daily_start < daily_end <= 86400")


@dataclass(frozen=True)
class AffineTransform:
    """Maps normalized coordinates back to the original frame:
    original = normalized * scale + offset."""

    scale: float
    offset_x: float
    offset_y: float

    def __post_init__(self):
        if not self.scale > 0:
            raise IngestError("scale must be positive")

    def apply(self, x: float, y: float) -> tuple[float, float]:
        return x * self.scale + self.offset_x, y * self.scale + self.offset_y

    def invert(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.offset_x) / self.scale, (y - self.offset_y) / self.scale


def _parse_unix(tok: str) -> int:
    return int(float(tok))


def _parse_iso8601(tok: str) -> int:
    dt = datetime.fromisoformat(tok)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


TIME_HOOKS: dict[str, Callable[[str], int]] = {
    "unix": _parse_unix,
    "iso8601": _parse_iso8601,
}


@dataclass(frozen=True)
class ColumnSchema:
    """Column mapping for delimiter-separated AVL text."""

    delimiter: str = ","
    vehicle_col: int = 0
    x_col: int = 1
    y_col: int = 2
    t_col: int = 3
    route_col: int | None = None
    route_value: str | None = None
    time_format: str = "unix"  # key into TIME_HOOKS, or register a custom hook

    def time_parser(self) -> Callable[[str], int]:
        try:
            return TIME_HOOKS[self.time_format]
        except KeyError:
            raise IngestError(f"unknown time format {self.time_format!r}") from None


@dataclass
class ParseReport:
    rows_read: int = 0
    rows_kept: int = 0
    rows_rejected: int = 0
    duplicates_dropped: int = 0
    rows_filtered_by_route: int = 0


def parse_records(stream: Iterable[str], schema: ColumnSchema | None = None) -> tuple[TraceSet, ParseReport]:
    """Parse rows into per-vehicle chronological traces.

    Malformed rows (missing fields, non-numeric coordinates or time, negative
    time) are rejected and counted, never silently zeroed.  For duplicate
    (vehicle, t) pairs the later row in the stream wins.
    """
    schema = schema or ColumnSchema()
    parse_time = schema.time_parser()
    needed = max(schema.vehicle_col, schema.x_col, schema.y_col, schema.t_col,
                 schema.route_col if schema.route_col is not None else 0)
    report = ParseReport()
    by_vehicle: dict[str, dict[int, AvlRecord]] = {}
    for line in stream:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        report.rows_read += 1
        parts = line.split(schema.delimiter)
        if len(parts) <= needed:
            report.rows_rejected += 1
            continue
        if schema.route_col is not None and schema.route_value is not None:
            if parts[schema.route_col].strip() != schema.route_value:
                report.rows_filtered_by_route += 1
                continue
        try:
            vid = parts[schema.vehicle_col].strip()
            x = float(parts[schema.x_col])
            y = float(parts[schema.y_col])
            t = parse_time(parts[schema.t_col].strip())
        except (ValueError, OverflowError):
            report.rows_rejected += 1
            continue
        if not vid or not math.isfinite(x) or not math.isfinite(y) or t < 0:
            report.rows_rejected += 1
            continue
        slot = by_vehicle.setdefault(vid, {})
        if t in slot:
            report.duplicates_dropped += 1
        slot[t] = AvlRecord(vid, x, y, t)
    traces = {vid: [recs[t] for t in sorted(recs)] for vid, recs in by_vehicle.items()}
    report.rows_kept = sum(len(v) for v in traces.values())
    return TraceSet(traces), report


def serialize(ts: TraceSet, schema: ColumnSchema | None = None) -> str:
    """Inverse of parse_records on well-formed trace sets (default column order)."""
    schema = schema or ColumnSchema()
    if (schema.vehicle_col, schema.x_col, schema.y_col, schema.t_col) != (0, 1, 2, 3):
        raise IngestError("serialize supports the default column order only")
    lines = []
    for rec in ts.all_records():
        lines.append(schema.delimiter.join([rec.vehicle_id, repr(rec.x), repr(rec.y), str(rec.t)]))
    return "\n".join(lines) + ("\n" if lines else "")


def filter_window(ts: TraceSet, window: TimeWindow, tz_offset: int = 0) -> TraceSet:
    """Keep records whose local second-of-day lies in [daily_start, daily_end)
    and whose local weekday is selected.  Per-vehicle order is preserved."""
    out: dict[str, list[AvlRecord]] = {}
    for vid, recs in ts.traces.items():
        kept = []
        for r in recs:
            local = r.t + tz_offset
            sod = local % 86400
            weekday = (local // 86400 + 3) % 7  # epoch day 0 was a Thursday
            if window.daily_start <= sod < window.daily_end and weekday in window.weekdays:
                kept.append(r)
        if kept:
            out[vid] = kept
    return TraceSet(out)


def normalize_coordinates(ts: TraceSet) -> tuple[TraceSet, AffineTransform]:
    """Map coordinates into a [0,1]x[0,1]-bounded frame, preserving aspect ratio.

    The returned transform maps normalized coordinates back to the input frame.
    Normalization removes any uniform scale and offset of the input, so two
    inputs differing by such a map normalize identically (exactly so whenever
    the map itself is exact in floating point, e.g. power-of-two scales).
    """
    xs = [r.x for r in ts.all_records()]
    ys = [r.y for r in ts.all_records()]
    if not xs:
        raise IngestError("empty trace set")
    min_x, max_x = min(xs), max(xs)
    min_y, max_y = min(ys), max(ys)
    extent = max(max_x - min_x, max_y - min_y)
    if extent <= 0:
        raise DegenerateExtentError("all points identical")
    out = {
        vid: [replace(r, x=(r.x - min_x) / extent, y=(r.y - min_y) / extent) for r in recs]
        for vid, recs in ts.traces.items()
    }
    return TraceSet(out), AffineTransform(scale=extent, offset_x=min_x, offset_y=min_y)
