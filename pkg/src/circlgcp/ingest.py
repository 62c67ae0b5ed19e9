"""Event CSV reading and writing.

Input columns: ``date`` (ISO-8601), ``time`` (``HH:MM`` or ``HH:MM:SS``),
``lat``, ``lon``, ``type``. Rows that fail to parse or fall outside the
study region are kept in a rejection report rather than dropped silently.
"""

from __future__ import annotations

import csv
import datetime as _dt
import re
from dataclasses import dataclass, field

from .geomtime import EventRecord, InputError, Region, assign_day_of_week, project, unproject, wrap_time

REQUIRED_COLUMNS = ("date", "time", "lat", "lon", "type")
_TIME_RE = re.compile(r"^(\d{1,2}):(\d{2})(?::(\d{2}))?$")


class ConfigError(InputError):
    pass


@dataclass
class Rejection:
    row: int
    reason: str
    raw: dict

    def as_dict(self) -> dict:
        return {"row": self.row, "reason": self.reason, **self.raw}


@dataclass
class IngestResult:
    events: list = field(default_factory=list)
    rejections: list = field(default_factory=list)
    skipped_type: int = 0
    timestamps: list = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.events) + len(self.rejections) + self.skipped_type


def parse_clock(text: str) -> _dt.time:
    m = _TIME_RE.match(text.strip())
    if not m:
        raise InputError(f"malformed time {text!r}")
    h, mi, s = int(m.group(1)), int(m.group(2)), int(m.group(3) or 0)
    if not (0 <= h < 24 and 0 <= mi < 60 and 0 <= s < 60):
        raise InputError(f"time out of range {text!r}")
    return _dt.time(h, mi, s)


def parse_row(row: dict, reference, region: Region | None) -> tuple[EventRecord, _dt.datetime]:
    try:
        day = _dt.date.fromisoformat(row["date"].strip())
    except (ValueError, AttributeError) as exc:
        raise InputError(f"malformed date {row.get('date')!r}") from exc
    clock = parse_clock(row["time"] or "")
    try:
        lat, lon = float(row["lat"]), float(row["lon"])
    except (TypeError, ValueError) as exc:
        raise InputError("malformed coordinates") from exc
    x, y = project(lat, lon, reference)
    if region is not None and not region.contains(x, y)[0]:
        raise InputError("outside region")
    ts = _dt.datetime.combine(day, clock)
    hours = clock.hour + clock.minute / 60.0 + clock.second / 3600.0
    rec = EventRecord(x, y, wrap_time(hours), assign_day_of_week(ts), (row["type"] or "").strip())
    return rec, ts


def ingest(path, reference, region: Region | None = None, types=None) -> IngestResult:
    """Read an event CSV, projecting about ``reference = (lat, lon)``.

    ``types`` optionally restricts to crime types (case-insensitive).
    """
    wanted = None if not types else {t.lower() for t in types}
    out = IngestResult()
    with open(path, newline="", encoding="utf-8") as fh:
        lines = fh.readlines()
    # leading "#" lines carry provenance and are not data
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    reader = csv.DictReader(lines[skip:])
    cols = [c.strip().lower() for c in (reader.fieldnames or [])]
    missing = [c for c in REQUIRED_COLUMNS if c not in cols]
    if missing:
        raise ConfigError(f"event CSV lacks columns: {', '.join(missing)}")
    reader.fieldnames = cols
    for i, row in enumerate(reader, start=skip + 2):
        if wanted is not None and (row.get("type") or "").strip().lower() not in wanted:
            out.skipped_type += 1
            continue
        try:
            rec, ts = parse_row(row, reference, region)
        except InputError as exc:
            out.rejections.append(Rejection(i, str(exc), {k: row.get(k) for k in REQUIRED_COLUMNS}))
            continue
        out.events.append(rec)
        out.timestamps.append(ts)
    return out


def write_events(path, points, reference, type_label: str = "simulated", header_comment: str | None = None) -> None:
    """Write simulated points (see :class:`circlgcp.simulate.SimPoint`) in the ingest format."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(REQUIRED_COLUMNS)
        for p in points:
            lat, lon = unproject(p.easting, p.northing, reference)
            ts = p.timestamp()
            w.writerow([ts.date().isoformat(), ts.strftime("%H:%M:%S"), f"{lat:.9f}", f"{lon:.9f}", type_label])


def write_rejections(path, rejections) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["row", "reason", *REQUIRED_COLUMNS])
        w.writeheader()
        for r in rejections:
            w.writerow(r.as_dict())
