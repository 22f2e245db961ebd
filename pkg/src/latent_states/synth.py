"""Deterministic synthetic cohorts with planted behavioural archetypes.

Each archetype owns a Markov chain over room locations, stepped once per
20-minute slot while the participant is awake, plus a wake/sleep schedule and
a clinical profile.  Days start with the chain drawn from its stationary
distribution, so location frequencies are stationary throughout.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _io
from ._validation import ConfigError
from .ingest import BED_IN, BED_OUT, DEFAULT_VOCABULARY, ClinicalRecord, SensorEvent, day_start, serialize_clinical, serialize_events

SLOT_SECONDS = 1200
SLOTS_PER_DAY = 72
GENDERS = ("female", "male")
DIAGNOSES = ("AD", "MCI", "mixed")


@dataclass(frozen=True, eq=False)
class ArchetypeSpec:
    id: str
    locations: tuple[str, ...]
    transition: np.ndarray
    events_per_slot: float = 4.0
    noise: float = 0.0
    wake_hour: float = 7.0
    sleep_hour: float = 22.0
    schedule_sd_minutes: float = 0.0
    mmse_mean: float = 25.0
    mmse_sd: float = 2.0
    adas_mean: float = 15.0
    adas_sd: float = 3.0
    mmse_drift: float = -1.0
    adas_drift: float = 2.0

    def __post_init__(self):
        T = np.asarray(self.transition, dtype=np.float64)
        k = len(self.locations)
        if T.shape != (k, k):
            raise ConfigError(f"archetype {self.id}: transition must be {k}x{k}, got {T.shape}")
        bad = [i for i in range(k) if np.any(T[i] < 0) or abs(T[i].sum() - 1.0) > 1e-9]
        if bad:
            raise ConfigError(f"archetype {self.id}: transition row(s) {bad} are not probability vectors")
        unknown = [loc for loc in self.locations if loc not in DEFAULT_VOCABULARY or loc in (BED_IN, BED_OUT)]
        if unknown:
            raise ConfigError(f"archetype {self.id}: unknown room location(s) {unknown}")
        if not 0 <= self.wake_hour < self.sleep_hour <= 24:
            raise ConfigError(f"archetype {self.id}: need 0 <= wake_hour < sleep_hour <= 24")
        if self.events_per_slot < 0 or not 0 <= self.noise <= 1 or self.schedule_sd_minutes < 0:
            raise ConfigError(f"archetype {self.id}: rates, noise and schedule spread must be non-negative")
        object.__setattr__(self, "transition", T)

    def stationary(self) -> np.ndarray:
        """Stationary distribution ``pi = pi T`` of the location chain."""
        k = len(self.locations)
        A = np.vstack([self.transition.T - np.eye(k), np.ones(k)])
        b = np.r_[np.zeros(k), 1.0]
        pi = np.linalg.lstsq(A, b, rcond=None)[0]
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()


def load_archetypes(source=None) -> list[ArchetypeSpec]:
    """Read archetypes from a JSON path; ``None`` or ``"default3.json"`` loads the bundled three."""
    if source is None or (isinstance(source, str) and source == "default3.json" and not Path(source).exists()):
        text = resources.files("latent_states").joinpath("data/default3.json").read_text()
    else:
        text = Path(source).read_text()
    return archetypes_from_json(json.loads(text))


def archetypes_from_json(doc: dict) -> list[ArchetypeSpec]:
    try:
        locations = tuple(doc["locations"])
        out = []
        for a in doc["archetypes"]:
            clinical = a.get("clinical", {})
            extra = {k: a[k] for k in ("events_per_slot", "noise", "wake_hour", "sleep_hour",
                                       "schedule_sd_minutes") if k in a}
            out.append(ArchetypeSpec(a["id"], locations, np.asarray(a["transition"], dtype=np.float64),
                                     **extra, **clinical))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed archetype file: {exc}") from None
    if not out:
        raise ConfigError("archetype file defines no archetypes")
    return out


def simulate_locations(arch: ArchetypeSpec, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Location indices of a chain run started from the stationary distribution."""
    cum = np.cumsum(arch.transition, axis=1)
    out = np.empty(n_steps, dtype=np.int64)
    if n_steps == 0:
        return out
    u = rng.random(n_steps)
    state = int(min(np.searchsorted(np.cumsum(arch.stationary()), u[0], side="right"), len(cum) - 1))
    out[0] = state
    for t in range(1, n_steps):
        state = int(min(np.searchsorted(cum[state], u[t], side="right"), len(cum) - 1))
        out[t] = state
    return out


def _clock(hour: float, sd_minutes: float, rng) -> int:
    sec = hour * 3600.0 + (rng.normal(0.0, sd_minutes * 60.0) if sd_minutes > 0 else 0.0)
    return int(np.clip(round(sec), 0, 86400))


def simulate_day(arch: ArchetypeSpec, participant_id: str, date: dt.date, rng: np.random.Generator,
                 tz_offset: int = 0) -> list[SensorEvent]:
    """One day of events: bed-out at waking, room detections while awake, bed-in at bedtime."""
    wake = _clock(arch.wake_hour, arch.schedule_sd_minutes, rng)
    sleep = _clock(arch.sleep_hour, arch.schedule_sd_minutes, rng)
    if sleep <= wake:
        sleep = min(wake + SLOT_SECONDS, 86400)
    first, last = wake // SLOT_SECONDS, (sleep - 1) // SLOT_SECONDS
    locs = simulate_locations(arch, last - first + 1, rng)
    base = day_start(date, tz_offset)
    offsets, tokens = [], []
    k = len(arch.locations)
    for j, loc in zip(range(first, last + 1), locs):
        lo, hi = max(wake, j * SLOT_SECONDS), min(sleep, (j + 1) * SLOT_SECONDS)
        n = int(rng.poisson(arch.events_per_slot))
        if n == 0 or hi <= lo:
            continue
        secs = np.sort(rng.integers(lo, hi, size=n))
        which = np.where(rng.random(n) < arch.noise, rng.integers(0, k, size=n), loc)
        offsets.extend(secs.tolist())
        tokens.extend(arch.locations[w] for w in which)
    events = [SensorEvent(participant_id, base + s, t) for s, t in zip(offsets, tokens)]
    if wake > 0:
        events.insert(0, SensorEvent(participant_id, base + wake, BED_OUT))
    if sleep < 86400:
        events.append(SensorEvent(participant_id, base + sleep, BED_IN))
    return events


@dataclass
class SynthCohort:
    events: list[SensorEvent]
    clinical: list[ClinicalRecord]
    truth: dict[str, int]
    archetypes: list[ArchetypeSpec]


def participant_ids(n: int) -> list[str]:
    width = max(3, len(str(n)))
    return [f"P{i + 1:0{width}d}" for i in range(n)]


def _clinical_records(pid: str, arch: ArchetypeSpec, assessed: dt.date, rng) -> list[ClinicalRecord]:
    mmse = int(np.clip(round(rng.normal(arch.mmse_mean, arch.mmse_sd)), 0, 30))
    adas = round(float(np.clip(rng.normal(arch.adas_mean, arch.adas_sd), 0.0, 70.0)), 1)
    prior_mmse = int(np.clip(round(mmse - arch.mmse_drift + rng.normal(0.0, 1.0)), 0, 30))
    prior_adas = round(float(np.clip(adas - arch.adas_drift + rng.normal(0.0, 1.5), 0.0, 70.0)), 1)
    common = dict(
        hads_depression=int(np.clip(round(rng.normal(6.0, 3.0)), 0, 21)),
        hads_anxiety=int(np.clip(round(rng.normal(6.0, 3.0)), 0, 21)),
        age=round(float(rng.normal(78.0, 6.0)), 1),
        gender=GENDERS[int(rng.integers(len(GENDERS)))],
        lives_alone=bool(rng.random() < 0.4),
        diagnosis=DIAGNOSES[int(rng.integers(len(DIAGNOSES)))],
    )
    prior = ClinicalRecord(pid, assessed - dt.timedelta(days=365), prior_mmse, prior_adas, **common)
    current = ClinicalRecord(pid, assessed, mmse, adas, **common,
                             delta_mmse=float(mmse - prior_mmse), delta_adas=round(adas - prior_adas, 1))
    return [prior, current]


def generate_cohort(n_participants: int, archetypes: Sequence[ArchetypeSpec], days_per_participant: int,
                    seed: int = 0, start_date: dt.date = dt.date(2024, 1, 1), tz_offset: int = 0) -> SynthCohort:
    """Round-robin archetype assignment; every participant draws from its own derived seed."""
    if not archetypes:
        raise ConfigError("need at least one archetype")
    if days_per_participant < 1 or n_participants < 1:
        raise ConfigError("need at least one participant and one day")
    events: list[SensorEvent] = []
    clinical: list[ClinicalRecord] = []
    truth: dict[str, int] = {}
    for i, pid in enumerate(participant_ids(n_participants)):
        a = i % len(archetypes)
        arch = archetypes[a]
        truth[pid] = a
        rng = np.random.default_rng(_io.derive_seed(seed, f"synth:{pid}"))
        for d in range(days_per_participant):
            events.extend(simulate_day(arch, pid, start_date + dt.timedelta(days=d), rng, tz_offset))
        assessed = start_date + dt.timedelta(days=days_per_participant)
        clinical.extend(_clinical_records(pid, arch, assessed, rng))
    return SynthCohort(events, clinical, truth, list(archetypes))


EVENTS_FILE = "events.csv"
CLINICAL_FILE = "clinical.csv"
TRUTH_FILE = "truth.csv"


def write_cohort_files(cohort: SynthCohort, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {"events": out_dir / EVENTS_FILE, "clinical": out_dir / CLINICAL_FILE, "truth": out_dir / TRUTH_FILE}
    _io.atomic_write_text(paths["events"], serialize_events(cohort.events, "csv"))
    _io.atomic_write_text(paths["clinical"], serialize_clinical(cohort.clinical))
    _io.write_csv(paths["truth"], ["participant_id", "archetype", "archetype_id"],
                  ([p, a, cohort.archetypes[a].id] for p, a in sorted(cohort.truth.items())))
    return paths


def read_truth(path) -> dict[str, int]:
    _, rows = _io.read_csv(path)
    return {r[0]: int(r[1]) for r in rows}
