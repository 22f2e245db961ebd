"""Rectify participant-days into fixed-width location slots.

Each window of ``window_minutes`` gets the most frequent location among the
events falling in it (half-open ``[start, end)``); a window with no events
is ``nowhere``.  Ties go to the location seen first in the window, then to
the lexicographically smaller token.

Sleep-mat ``bed-in``/``bed-out`` events are not locations themselves.  The
span between them becomes ``sleep`` occupancy that counts as one event per
in-bed second of the window.  A ``bed-out`` with no preceding ``bed-in`` on
that day means the participant was in bed from midnight; a trailing
``bed-in`` means in bed until the next midnight.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import _io
from ._validation import ConfigError
from .ingest import BED_IN, BED_OUT, DEFAULT_VOCABULARY, CohortIndex, SensorEvent, day_start

NOWHERE = "nowhere"
SLEEP = "sleep"
DAY_SECONDS = 86400


def slot_vocabulary(event_vocabulary: Iterable[str] = DEFAULT_VOCABULARY) -> tuple[str, ...]:
    """Tokens a rectified slot can take, in one-hot column order."""
    event_vocabulary = tuple(event_vocabulary)
    vocab = [t for t in event_vocabulary if t not in (BED_IN, BED_OUT, NOWHERE, SLEEP)]
    if BED_IN in event_vocabulary or BED_OUT in event_vocabulary or SLEEP in event_vocabulary:
        vocab.append(SLEEP)
    vocab.append(NOWHERE)
    return tuple(vocab)


def n_slots_for(window_minutes: int) -> int:
    if window_minutes <= 0 or 1440 % window_minutes:
        raise ConfigError(f"window_minutes must be a positive divisor of 1440, got {window_minutes}")
    return 1440 // window_minutes


@dataclass(frozen=True)
class DailyActivitySequence:
    participant_id: str
    date: dt.date
    slots: tuple[str, ...]

    @property
    def key(self) -> tuple[str, dt.date]:
        return (self.participant_id, self.date)

    def to_json(self) -> dict:
        return {"participant_id": self.participant_id, "date": self.date.isoformat(),
                "slots": list(self.slots)}

    @classmethod
    def from_json(cls, d: dict) -> "DailyActivitySequence":
        return cls(d["participant_id"], dt.date.fromisoformat(d["date"]), tuple(d["slots"]))


def _sleep_spans(events: Sequence[SensorEvent], start: int, end: int) -> list[tuple[int, int]]:
    spans = []
    in_bed_since = None
    first_bed_event = True
    for ev in events:
        if ev.location == BED_IN:
            if in_bed_since is None:
                in_bed_since = ev.timestamp
            first_bed_event = False
        elif ev.location == BED_OUT:
            if in_bed_since is not None:
                spans.append((in_bed_since, ev.timestamp))
            elif first_bed_event:
                spans.append((start, ev.timestamp))
            in_bed_since = None
            first_bed_event = False
    if in_bed_since is not None:
        spans.append((in_bed_since, end))
    return [(max(a, start), min(b, end)) for a, b in spans if min(b, end) > max(a, start)]


def rectify_day(events: Sequence[SensorEvent], date: dt.date, *, tz_offset: int = 0,
                window_minutes: int = 20, participant_id: str | None = None,
                vocabulary: Sequence[str] | None = None) -> DailyActivitySequence:
    """Collapse one participant-day of sorted events into ``1440 / window_minutes`` slots."""
    n_slots = n_slots_for(window_minutes)
    vocab = tuple(vocabulary) if vocabulary is not None else slot_vocabulary()
    if participant_id is None:
        participant_id = events[0].participant_id if events else ""
    width = window_minutes * 60
    start = day_start(date, tz_offset)
    end = start + DAY_SECONDS
    tok_index = {t: i for i, t in enumerate(vocab)}
    V = len(vocab)

    counts = np.zeros((n_slots, V), dtype=np.int64)
    first = np.full((n_slots, V), np.iinfo(np.int64).max, dtype=np.int64)

    pir = [e for e in events if e.location not in (BED_IN, BED_OUT)]
    if pir:
        ts = np.fromiter((e.timestamp for e in pir), dtype=np.int64, count=len(pir))
        try:
            tok = np.fromiter((tok_index[e.location] for e in pir), dtype=np.int64, count=len(pir))
        except KeyError as exc:
            raise ValueError(f"location {exc.args[0]!r} not in slot vocabulary {vocab}") from None
        if ts.min() < start or ts.max() >= end:
            raise ValueError(f"event outside local day {date} for participant {participant_id!r}")
        slot = (ts - start) // width
        flat = slot * V + tok
        counts += np.bincount(flat, minlength=n_slots * V).reshape(n_slots, V)
        np.minimum.at(first.reshape(-1), flat, ts)

    if len(pir) != len(events):
        if SLEEP not in tok_index:
            raise ValueError("bed events present but vocabulary has no 'sleep' token")
        s = tok_index[SLEEP]
        for a, b in _sleep_spans(events, start, end):
            for w in range((a - start) // width, (b - 1 - start) // width + 1):
                lo = max(a, start + w * width)
                hi = min(b, start + (w + 1) * width)
                counts[w, s] += hi - lo
                first[w, s] = min(first[w, s], lo)

    nowhere = tok_index.get(NOWHERE)
    slots = []
    for w in range(n_slots):
        row = counts[w]
        best = None
        for i in range(V):
            c = int(row[i])
            if c == 0 or i == nowhere:
                continue
            cand = (-c, int(first[w, i]), vocab[i])
            if best is None or cand < best:
                best = cand
        slots.append(best[2] if best is not None else NOWHERE)
    return DailyActivitySequence(participant_id, date, tuple(slots))


def rectify_cohort(index: CohortIndex, window_minutes: int = 20,
                   vocabulary: Sequence[str] | None = None) -> list[DailyActivitySequence]:
    return [rectify_day(evs, d, tz_offset=index.tz_offset, window_minutes=window_minutes,
                        participant_id=pid, vocabulary=vocabulary)
            for pid, d, evs in index.iter_days()]


def render_text(sequence: DailyActivitySequence) -> str:
    return " ".join(sequence.slots)


def parse_text(text: str, participant_id: str, date: dt.date, *, n_slots: int = 72,
               vocabulary: Sequence[str] | None = None) -> DailyActivitySequence:
    tokens = tuple(text.split(" "))
    if len(tokens) != n_slots:
        raise ValueError(f"expected {n_slots} tokens, got {len(tokens)}")
    vocab = set(vocabulary if vocabulary is not None else slot_vocabulary())
    bad = [t for t in tokens if t not in vocab]
    if bad:
        raise ValueError(f"token {bad[0]!r} not in vocabulary")
    return DailyActivitySequence(participant_id, date, tokens)


def one_hot_encode(sequence: DailyActivitySequence, vocabulary: Sequence[str]) -> np.ndarray:
    """Block one-hot vector: slot ``t`` occupies ``[t*V, (t+1)*V)``."""
    index = {t: i for i, t in enumerate(vocabulary)}
    V = len(vocabulary)
    out = np.zeros(len(sequence.slots) * V, dtype=np.float64)
    for t, tok in enumerate(sequence.slots):
        try:
            out[t * V + index[tok]] = 1.0
        except KeyError:
            raise ValueError(f"token {tok!r} at slot {t} not in vocabulary") from None
    return out


class OneHotDayEncoder(TransformerMixin, BaseEstimator):
    """One-hot encode daily slot sequences into a dense matrix.

    Parameters
    ----------
    vocabulary : sequence of str, optional
        Slot tokens in column order.  When omitted, ``fit`` uses the default
        slot vocabulary extended by any unseen tokens in sorted order.
    """

    def __init__(self, vocabulary=None):
        self.vocabulary = vocabulary

    def fit(self, sequences, y=None):
        if self.vocabulary is not None:
            vocab = tuple(self.vocabulary)
        else:
            base = list(slot_vocabulary())
            seen = sorted({t for s in sequences for t in s.slots} - set(base))
            vocab = tuple(base[:-1] + seen + [NOWHERE])
        self.vocabulary_ = vocab
        return self

    def transform(self, sequences):
        if not hasattr(self, "vocabulary_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("OneHotDayEncoder is not fitted")
        seqs = list(sequences)
        if not seqs:
            return np.zeros((0, 0))
        return np.vstack([one_hot_encode(s, self.vocabulary_) for s in seqs])


def write_days(path, sequences: Iterable[DailyActivitySequence]) -> None:
    _io.write_jsonl(path, (s.to_json() for s in sequences))


def read_days(path) -> list[DailyActivitySequence]:
    return [DailyActivitySequence.from_json(r) for r in _io.read_jsonl(path)]
