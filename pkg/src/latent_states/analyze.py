"""Period grids, participant similarity, state/clinical correlations and re-clustering."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from . import _io
from .cluster import select_k
from .ingest import ClinicalRecord
from .periods import period_boundaries, period_index
from .transition import StateVector, state_columns

CLINICAL_METRICS = ("mmse", "adas_cog", "hads_depression", "hads_anxiety", "age",
                    "delta_mmse", "delta_adas")
MIN_PAIRS = 3


@dataclass
class PeriodGrid:
    bounds: list[dt.date]
    cells: dict[tuple[str, int], StateVector] = field(default_factory=dict)

    @property
    def n_periods(self) -> int:
        return len(self.bounds) - 1

    def period(self, i: int) -> tuple[dt.date, dt.date]:
        return self.bounds[i], self.bounds[i + 1]

    def participants(self, i: int | None = None) -> list[str]:
        return sorted({p for (p, j) in self.cells if i is None or j == i})

    def vectors(self, i: int) -> dict[str, np.ndarray]:
        return {p: self.cells[(p, i)].values for p in self.participants(i)}

    @property
    def k(self) -> int:
        return len(next(iter(self.cells.values())).values) if self.cells else 0


def build_period_grid(vectors: Iterable[StateVector], period_months: int = 3,
                      start_date: dt.date | None = None) -> PeriodGrid:
    """Place state vectors on aligned period boundaries.

    A vector whose span crosses a boundary, or a second vector for the same
    participant and period, is an overlapping definition and raises.
    """
    vectors = list(vectors)
    if not vectors:
        return PeriodGrid([start_date] if start_date else [])
    start = start_date or min(v.period_start for v in vectors)
    last = max(v.period_end - dt.timedelta(days=1) for v in vectors)
    bounds = period_boundaries(start, last, period_months)
    grid = PeriodGrid(bounds)
    for v in vectors:
        i = period_index(v.period_start, bounds)
        if v.period_end > bounds[i + 1]:
            raise ValueError(f"state vector {v.participant_id} {v.period_start}..{v.period_end} "
                             f"overlaps period boundary {bounds[i + 1]}")
        if (v.participant_id, i) in grid.cells:
            raise ValueError(f"overlapping period definitions for {v.participant_id} in period {i}")
        grid.cells[(v.participant_id, i)] = v
    return grid


@dataclass
class SimilarityMatrix:
    participants: list[str]
    values: np.ndarray


def cosine_matrix(V: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(V, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    U = V / safe[:, None]
    S = U @ U.T
    S[norms == 0, :] = 0.0
    S[:, norms == 0] = 0.0
    S = np.clip((S + S.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(S, np.where(norms > 0, 1.0, 0.0))
    return S


def cosine_similarity_matrix(grid: PeriodGrid, period: int) -> SimilarityMatrix:
    vecs = grid.vectors(period)
    if len(vecs) < 2:
        raise ValueError(f"period {period} has {len(vecs)} participant(s); need at least 2")
    order = sorted(vecs)
    return SimilarityMatrix(order, cosine_matrix(np.vstack([vecs[p] for p in order])))


def participant_vectors(grid: PeriodGrid, period: int | None = None) -> dict[str, np.ndarray]:
    """One vector per participant: a single period's, or the mean over their periods."""
    if period is not None:
        return grid.vectors(period)
    out = {}
    for p in grid.participants():
        out[p] = np.mean([v.values for (q, _), v in sorted(grid.cells.items()) if q == p], axis=0)
    return out


def latest_clinical(clinical: Mapping[str, Sequence[ClinicalRecord]]) -> dict[str, ClinicalRecord]:
    return {p: max(recs, key=lambda r: r.assessment_date) for p, recs in clinical.items() if recs}


@dataclass
class Correlation:
    state: int
    metric: str
    r: float | None
    p: float | None
    n: int
    note: str = ""


def correlate_states_clinical(vectors: Mapping[str, np.ndarray], clinical: Mapping[str, ClinicalRecord],
                              metrics: Sequence[str] = CLINICAL_METRICS) -> list[Correlation]:
    """Pearson r and two-sided p for every (state, metric) cell.

    Missing metric values are dropped pairwise.  Cells with fewer than three
    pairs or a constant column carry ``r=None`` and a note.
    """
    pids = sorted(p for p in vectors if p in clinical)
    if not pids:
        return []
    k = len(next(iter(vectors.values())))
    out = []
    for s in range(k):
        for m in metrics:
            xs, ys = [], []
            for p in pids:
                y = getattr(clinical[p], m)
                if y is None:
                    continue
                xs.append(float(vectors[p][s]))
                ys.append(float(y))
            n = len(xs)
            if n < MIN_PAIRS:
                out.append(Correlation(s, m, None, None, n, f"fewer than {MIN_PAIRS} pairs"))
                continue
            x, y = np.array(xs), np.array(ys)
            if np.ptp(x) == 0 or np.ptp(y) == 0:
                which = "state" if np.ptp(x) == 0 else "metric"
                out.append(Correlation(s, m, None, None, n, f"zero variance in {which}"))
                continue
            res = stats.pearsonr(x, y)
            out.append(Correlation(s, m, float(np.clip(res.statistic, -1.0, 1.0)), float(res.pvalue), n))
    return out


@dataclass
class StateClusters:
    k: int
    silhouettes: dict[int, float]
    labels: dict[str, int]
    summaries: dict[int, dict[str, dict[str, float | int | None]]]


def cluster_state_vectors(vectors: Mapping[str, np.ndarray], clinical: Mapping[str, ClinicalRecord],
                          k_range: Sequence[int] = (2, 3, 4, 5), seed=0,
                          metrics: Sequence[str] = CLINICAL_METRICS) -> StateClusters:
    """Re-cluster participants by state vector and summarise metrics per cluster."""
    pids = sorted(vectors)
    if len(pids) < max(k_range) + 1:
        raise ValueError(f"need at least {max(k_range) + 1} participants, got {len(pids)}")
    X = np.vstack([vectors[p] for p in pids])
    k, scores, models = select_k(X, k_range, seed=seed)
    labels = {p: int(c) for p, c in zip(pids, models[k].labels_)}
    summaries: dict = {}
    for c in range(k):
        members = [p for p in pids if labels[p] == c]
        per_metric = {}
        for m in metrics:
            vals = [float(getattr(clinical[p], m)) for p in members
                    if p in clinical and getattr(clinical[p], m) is not None]
            per_metric[m] = {"n": len(vals),
                             "mean": float(np.mean(vals)) if vals else None,
                             "std": float(np.std(vals)) if vals else None}
        summaries[c] = {"members": len(members), "metrics": per_metric}
    return StateClusters(k, scores, labels, summaries)


# -- file outputs ------------------------------------------------------------

STATES_BY_PERIOD = "states_by_period.csv"
PERIODS = "periods.csv"
CORRELATIONS = "correlations.csv"
CLUSTERS = "state_clusters.json"


def similarity_filename(start: dt.date) -> str:
    return f"similarity_{start.isoformat()}.csv"


def write_analysis(grid: PeriodGrid, clinical: Mapping[str, Sequence[ClinicalRecord]], out_dir,
                   k_range: Sequence[int] = (2, 3, 4, 5), seed=0) -> dict:
    out_dir = Path(out_dir)
    k = grid.k
    cols = state_columns(k)
    rows = []
    period_rows = []
    for i in range(grid.n_periods):
        start, end = grid.period(i)
        pids = grid.participants(i)
        period_rows.append([start.isoformat(), end.isoformat(), len(pids)])
        for p in pids:
            rows.append([start.isoformat(), end.isoformat(), p, *map(float, grid.cells[(p, i)].values)])
        if len(pids) >= 2:
            sim = cosine_similarity_matrix(grid, i)
            _io.write_csv(out_dir / similarity_filename(start), ["participant_id", *sim.participants],
                          ([p, *map(float, r)] for p, r in zip(sim.participants, sim.values)))
    _io.write_csv(out_dir / STATES_BY_PERIOD, ["period_start", "period_end", "participant_id", *cols], rows)
    _io.write_csv(out_dir / PERIODS, ["period_start", "period_end", "participants"], period_rows)

    latest = latest_clinical(clinical)
    vecs = participant_vectors(grid)
    corr = correlate_states_clinical(vecs, latest)
    _io.write_csv(out_dir / CORRELATIONS, ["state", "metric", "r", "p", "n", "note"],
                  ([f"state{c.state + 1}", c.metric, c.r, c.p, c.n, c.note] for c in corr))

    summary: dict = {"participants": len(vecs), "periods": grid.n_periods}
    try:
        sc = cluster_state_vectors(vecs, latest, k_range, seed)
        summary["clusters"] = {"k": sc.k, "silhouettes": {str(a): b for a, b in sc.silhouettes.items()},
                               "labels": sc.labels,
                               "summaries": {str(c): s for c, s in sc.summaries.items()}}
    except ValueError as exc:
        summary["clusters"] = {"skipped": str(exc)}
    _io.write_json(out_dir / CLUSTERS, summary)
    return summary
