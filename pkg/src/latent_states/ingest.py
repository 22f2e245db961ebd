"""Parsing, validation and day segmentation of raw sensor events.

Events arrive as CSV (header ``participant_id,timestamp,location``) or JSONL
with the same keys.  Timestamps are integer UTC seconds; a participant-day is
a calendar date at a fixed, cohort-wide UTC offset (no DST).
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import re
from collections import Counter
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import IO, Iterable, NamedTuple

from . import _io

DEFAULT_VOCABULARY = (
    "lounge", "kitchen", "hallway", "bedroom", "bathroom", "bed-in", "bed-out",
)
BED_IN = "bed-in"
BED_OUT = "bed-out"

EVENT_FIELDS = ("participant_id", "timestamp", "location")

COHORT_FILE = "cohort.jsonl"
CLINICAL_FILE = "clinical.jsonl"
REPORT_FILE = "ingest_report.json"


class IngestError(ValueError):
    """A malformed input row.  ``line`` is 1-based and counts the CSV header."""

    def __init__(self, line: int, cause: str):
        super().__init__(f"line {line}: {cause}")
        self.line = line
        self.cause = cause


class SensorEvent(NamedTuple):
    participant_id: str
    timestamp: int
    location: str


_INT_RE = re.compile(r"^[+-]?\d+$")


def _to_bytes_text(data) -> str:
    if isinstance(data, (bytes, bytearray)):
        return bytes(data).decode("utf-8")
    if isinstance(data, str):
        return data
    raw = data.read()
    return raw.decode("utf-8") if isinstance(raw, bytes) else raw


class EventParser:
    """Strict or lenient event parser.

    In lenient mode bad rows are skipped and collected in ``skipped_``;
    otherwise the first bad row raises :class:`IngestError`.
    """

    def __init__(self, vocabulary: Iterable[str] = DEFAULT_VOCABULARY, lenient: bool = False):
        self.vocabulary = tuple(vocabulary)
        self.lenient = lenient

    def _event(self, line: int, pid, ts, loc) -> SensorEvent:
        if pid is None or str(pid) == "":
            raise IngestError(line, "missing field 'participant_id'")
        if ts is None or (isinstance(ts, str) and ts == ""):
            raise IngestError(line, "missing field 'timestamp'")
        if loc is None or loc == "":
            raise IngestError(line, "missing field 'location'")
        if isinstance(ts, bool):
            raise IngestError(line, f"malformed timestamp {ts!r}")
        if isinstance(ts, int):
            value = ts
        elif isinstance(ts, str) and _INT_RE.match(ts.strip()):
            value = int(ts)
        else:
            raise IngestError(line, f"malformed timestamp {ts!r}")
        if value < 0:
            raise IngestError(line, f"malformed timestamp {ts!r} (negative)")
        if loc not in self._vocab_set:
            raise IngestError(line, f"unknown location token {loc!r}")
        return SensorEvent(str(pid), value, str(loc))

    def parse(self, data, fmt: str = "csv") -> list[SensorEvent]:
        """Parse a byte stream, text, or file object into events in input order."""
        self._vocab_set = frozenset(self.vocabulary)
        self.skipped_: list[IngestError] = []
        text = _to_bytes_text(data)
        if fmt == "csv":
            rows = self._csv_rows(text)
        elif fmt == "jsonl":
            rows = self._jsonl_rows(text)
        else:
            raise ValueError(f"unknown event format {fmt!r}; expected csv or jsonl")
        events = []
        for line, row in rows:
            try:
                if isinstance(row, IngestError):
                    raise row
                events.append(self._event(line, *row))
            except IngestError as err:
                if not self.lenient:
                    raise
                self.skipped_.append(err)
        return events

    def _csv_rows(self, text: str):
        if not text.strip():
            return
        reader = csv.reader(io.StringIO(text))
        header = [h.strip() for h in next(reader)]
        missing = [f for f in EVENT_FIELDS if f not in header]
        if missing:
            raise IngestError(1, f"header lacks column(s) {', '.join(missing)}")
        idx = [header.index(f) for f in EVENT_FIELDS]
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) < len(header):
                yield line, IngestError(line, f"missing field(s): expected {len(header)} columns, got {len(row)}")
                continue
            yield line, tuple(row[i].strip() for i in idx)

    def _jsonl_rows(self, text: str):
        for line, raw in enumerate(text.splitlines(), start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                yield line, IngestError(line, f"invalid JSON ({exc.msg})")
                continue
            if not isinstance(rec, dict):
                yield line, IngestError(line, "record is not a JSON object")
                continue
            yield line, tuple(rec.get(f) for f in EVENT_FIELDS)


def parse_events(data, fmt: str = "csv", vocabulary: Iterable[str] = DEFAULT_VOCABULARY) -> list[SensorEvent]:
    """Strictly parse events; raises :class:`IngestError` on the first bad row."""
    return EventParser(vocabulary).parse(data, fmt)


def serialize_events(events: Iterable[SensorEvent], fmt: str = "csv") -> str:
    if fmt == "csv":
        return _io.csv_text(EVENT_FIELDS, events)
    if fmt == "jsonl":
        return "".join(json.dumps(dict(zip(EVENT_FIELDS, e))) + "\n" for e in events)
    raise ValueError(f"unknown event format {fmt!r}")


def parse_tz_offset(text: str) -> int:
    """``"+01:00"`` -> 3600.  Returns seconds east of UTC."""
    m = re.fullmatch(r"([+-])(\d{2}):(\d{2})", text.strip())
    if not m:
        raise ValueError(f"timezone offset must look like +HH:MM, got {text!r}")
    sign = 1 if m.group(1) == "+" else -1
    hours, minutes = int(m.group(2)), int(m.group(3))
    if hours > 14 or minutes >= 60:
        raise ValueError(f"timezone offset out of range: {text!r}")
    return sign * (hours * 3600 + minutes * 60)


def format_tz_offset(seconds: int) -> str:
    sign = "+" if seconds >= 0 else "-"
    s = abs(int(seconds))
    return f"{sign}{s // 3600:02d}:{(s % 3600) // 60:02d}"


def local_date(timestamp: int, tz_offset: int) -> dt.date:
    return dt.date(1970, 1, 1) + dt.timedelta(days=(timestamp + tz_offset) // 86400)


def day_start(date: dt.date, tz_offset: int) -> int:
    """UTC timestamp of local midnight at the start of ``date``."""
    return (date - dt.date(1970, 1, 1)).days * 86400 - tz_offset


# -- clinical records --------------------------------------------------------

@dataclass(frozen=True)
class ClinicalRecord:
    participant_id: str
    assessment_date: dt.date
    mmse: int | None = None
    adas_cog: float | None = None
    hads_depression: int | None = None
    hads_anxiety: int | None = None
    age: float | None = None
    gender: str | None = None
    lives_alone: bool | None = None
    diagnosis: str | None = None
    delta_mmse: float | None = None
    delta_adas: float | None = None

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["assessment_date"] = self.assessment_date.isoformat()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ClinicalRecord":
        d = dict(d)
        d["assessment_date"] = dt.date.fromisoformat(d["assessment_date"])
        return cls(**d)


CLINICAL_FIELDS = tuple(f.name for f in fields(ClinicalRecord))
_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _clinical_value(name: str, raw: str, line: int):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if name == "assessment_date":
            return dt.date.fromisoformat(raw)
        if name in ("mmse", "hads_depression", "hads_anxiety"):
            value = int(raw)
            hi = 30 if name == "mmse" else 21
            if not 0 <= value <= hi:
                raise IngestError(line, f"{name}={value} outside [0, {hi}]")
            return value
        if name in ("adas_cog", "age", "delta_mmse", "delta_adas"):
            value = float(raw)
            if name == "adas_cog" and value < 0:
                raise IngestError(line, f"adas_cog={value} is negative")
            return value
        if name == "lives_alone":
            return _BOOL[raw.lower()]
    except IngestError:
        raise
    except (ValueError, KeyError):
        raise IngestError(line, f"malformed {name} {raw!r}") from None
    return raw


def parse_clinical(data) -> list[ClinicalRecord]:
    text = _to_bytes_text(data)
    if not text.strip():
        return []
    reader = csv.DictReader(io.StringIO(text))
    missing = [f for f in ("participant_id", "assessment_date") if f not in (reader.fieldnames or [])]
    if missing:
        raise IngestError(1, f"clinical header lacks column(s) {', '.join(missing)}")
    records = []
    for row in reader:
        line = reader.line_num
        values = {}
        for name in CLINICAL_FIELDS:
            if name in row and row[name] is not None:
                values[name] = _clinical_value(name, row[name], line)
        if not values.get("participant_id"):
            raise IngestError(line, "missing field 'participant_id'")
        if values.get("assessment_date") is None:
            raise IngestError(line, "missing field 'assessment_date'")
        records.append(ClinicalRecord(**values))
    return records


def serialize_clinical(records: Iterable[ClinicalRecord]) -> str:
    def cell(v):
        if isinstance(v, dt.date):
            return v.isoformat()
        return v
    return _io.csv_text(CLINICAL_FIELDS, ([cell(getattr(r, f)) for f in CLINICAL_FIELDS] for r in records))


# -- cohort index ------------------------------------------------------------

@dataclass
class CohortIndex:
    """Per-participant, per-local-day event buckets plus clinical records."""

    tz_offset: int = 0
    days: dict[str, dict[dt.date, list[SensorEvent]]] = field(default_factory=dict)
    clinical: dict[str, list[ClinicalRecord]] = field(default_factory=dict)
    duplicate_events: int = 0
    orphan_clinical: list[str] = field(default_factory=list)

    @property
    def participants(self) -> list[str]:
        return sorted(self.days)

    def dates(self, participant_id: str) -> list[dt.date]:
        return sorted(self.days.get(participant_id, {}))

    def iter_days(self):
        """Yield ``(participant_id, date, events)`` sorted by participant then date."""
        for pid in self.participants:
            for d in self.dates(pid):
                yield pid, d, self.days[pid][d]

    @property
    def n_events(self) -> int:
        return sum(len(ev) for _, _, ev in self.iter_days())

    def attach_clinical(self, records: Iterable[ClinicalRecord]) -> None:
        """Attach records to known participants; others go to ``orphan_clinical``."""
        by_pid: dict[str, list[ClinicalRecord]] = {}
        orphans = set()
        for rec in records:
            if rec.participant_id in self.days:
                by_pid.setdefault(rec.participant_id, []).append(rec)
            else:
                orphans.add(rec.participant_id)
        self.clinical = {p: sorted(r, key=lambda c: c.assessment_date) for p, r in sorted(by_pid.items())}
        self.orphan_clinical = sorted(orphans)


def segment_days(events: Iterable[SensorEvent], tz_offset: int = 0) -> CohortIndex:
    """Bucket events by participant and local calendar date.

    Within a bucket events are sorted by timestamp; ties keep input order.
    """
    index = CohortIndex(tz_offset=tz_offset)
    seen: Counter = Counter()
    for ev in events:
        d = local_date(ev.timestamp, tz_offset)
        index.days.setdefault(ev.participant_id, {}).setdefault(d, []).append(ev)
        seen[ev] += 1
    for per_day in index.days.values():
        for bucket in per_day.values():
            bucket.sort(key=lambda e: e.timestamp)
    index.duplicate_events = sum(c - 1 for c in seen.values() if c > 1)
    return index


def write_cohort(index: CohortIndex, out_dir, extra_report: dict | None = None) -> None:
    out_dir = Path(out_dir)
    _io.write_jsonl(out_dir / COHORT_FILE, (
        {"participant_id": pid, "date": d.isoformat(),
         "events": [[e.timestamp, e.location] for e in evs]}
        for pid, d, evs in index.iter_days()
    ))
    _io.write_jsonl(out_dir / CLINICAL_FILE, (
        rec.to_json() for pid in sorted(index.clinical) for rec in index.clinical[pid]
    ))
    report = {
        "tz_offset": format_tz_offset(index.tz_offset),
        "participants": len(index.days),
        "participant_days": sum(len(v) for v in index.days.values()),
        "events": index.n_events,
        "duplicate_events": index.duplicate_events,
        "orphan_clinical_participants": index.orphan_clinical,
    }
    report.update(extra_report or {})
    _io.write_json(out_dir / REPORT_FILE, report)


def read_cohort(cohort_dir) -> CohortIndex:
    cohort_dir = Path(cohort_dir)
    report = json.loads((cohort_dir / REPORT_FILE).read_text())
    index = CohortIndex(tz_offset=parse_tz_offset(report["tz_offset"]),
                        duplicate_events=report.get("duplicate_events", 0))
    for rec in _io.read_jsonl(cohort_dir / COHORT_FILE):
        pid = rec["participant_id"]
        evs = [SensorEvent(pid, int(ts), loc) for ts, loc in rec["events"]]
        index.days.setdefault(pid, {})[dt.date.fromisoformat(rec["date"])] = evs
    clinical_path = cohort_dir / CLINICAL_FILE
    if clinical_path.exists():
        index.attach_clinical(ClinicalRecord.from_json(r) for r in _io.read_jsonl(clinical_path))
    return index


def ingest_files(events_path, clinical_path=None, tz_offset: int = 0,
                 vocabulary: Iterable[str] = DEFAULT_VOCABULARY, lenient: bool = False) -> tuple[CohortIndex, dict]:
    """Parse event and clinical files into a cohort index plus a summary report."""
    events_path = Path(events_path)
    fmt = "jsonl" if events_path.suffix.lower() in (".jsonl", ".ndjson") else "csv"
    parser = EventParser(vocabulary, lenient=lenient)
    with open(events_path, "rb") as fh:
        events = parser.parse(fh, fmt)
    index = segment_days(events, tz_offset)
    if clinical_path is not None:
        with open(clinical_path, "rb") as fh:
            index.attach_clinical(parse_clinical(fh))
    report = {
        "skipped_rows": len(parser.skipped_),
        "skipped_examples": [str(e) for e in parser.skipped_[:20]],
    }
    return index, report
