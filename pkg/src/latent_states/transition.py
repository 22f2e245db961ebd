"""Latent-state transition matrices and damped PageRank state vectors.

In proximity mode two days are linked when their t-SNE points lie within a
distance threshold; the count of linked ordered pairs between states ``i``
and ``j`` is row-normalised into a transition matrix.  Temporal mode counts
transitions between consecutive calendar days instead.  A state with no
outgoing links gets a uniform row.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import _io
from ._validation import ConfigError, check_labels, check_points, check_stochastic
from .periods import period_boundaries, period_index

MODES = ("proximity", "temporal")


def default_threshold(points, quantile: float = 0.10) -> float | None:
    """Quantile of all pairwise distances in the cloud; ``None`` for fewer than two points."""
    X = check_points(points)
    if X.shape[0] < 2:
        return None
    if not 0 < quantile <= 1:
        raise ConfigError(f"threshold quantile must be in (0, 1], got {quantile}")
    return float(np.quantile(pdist(X), quantile))


def count_transitions(points, labels, k: int, threshold: float | None = None,
                      mode: str = "proximity", dates: Sequence[dt.date] | None = None) -> np.ndarray:
    """Raw ``k x k`` transition counts (self-pairs excluded)."""
    if k <= 1:
        raise ConfigError(f"need k >= 2 states, got {k}")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    X = check_points(points)
    n = X.shape[0]
    labels = check_labels(labels, n, k)
    C = np.zeros((k, k))
    if mode == "proximity":
        if threshold is None or threshold <= 0:
            raise ConfigError(f"proximity mode needs a positive threshold, got {threshold}")
        if n >= 2:
            near = squareform(pdist(X)) <= threshold
            np.fill_diagonal(near, False)
            onehot = np.zeros((n, k))
            onehot[np.arange(n), labels] = 1.0
            C = onehot.T @ near.astype(np.float64) @ onehot
    else:
        if dates is None or len(dates) != n:
            raise ValueError("temporal mode needs one date per point")
        order = sorted(range(n), key=lambda i: dates[i])
        for a, b in zip(order[:-1], order[1:]):
            if (dates[b] - dates[a]).days == 1:
                C[labels[a], labels[b]] += 1
    return C


def normalize_rows(C) -> np.ndarray:
    """Row-normalise counts; all-zero rows become uniform ``1/k``."""
    C = np.asarray(C, dtype=np.float64)
    k = C.shape[0]
    rows = C.sum(axis=1, keepdims=True)
    return np.where(rows > 0, C / np.where(rows > 0, rows, 1.0), 1.0 / k)


def build_transition_matrix(points, labels, k: int, threshold: float | None = None,
                            mode: str = "proximity", dates=None) -> np.ndarray:
    return normalize_rows(count_transitions(points, labels, k, threshold, mode, dates))


@dataclass
class PageRankResult:
    values: np.ndarray
    n_iter: int
    converged: bool


def pagerank(T, alpha: float = 0.85, max_iter: int = 100, tol: float = 1e-8) -> PageRankResult:
    """Power iteration ``p <- (1 - alpha)/k + alpha * T.T @ p`` from the uniform vector.

    Stops once the L1 change drops below ``tol`` or after ``max_iter``
    updates; the result is renormalised to sum to one.
    """
    T = check_stochastic(T)
    k = T.shape[0]
    if k < 2:
        raise ConfigError("need at least two states")
    if not 0 < alpha < 1:
        raise ConfigError(f"damping factor must lie in (0, 1), got {alpha}")
    p = np.full(k, 1.0 / k)
    teleport = (1.0 - alpha) / k
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        nxt = teleport + alpha * (T.T @ p)
        step = float(np.abs(nxt - p).sum())
        p = nxt
        if step < tol:
            converged = True
            break
    return PageRankResult(p / p.sum(), n_iter, converged)


def pagerank_linear_solve(T, alpha: float = 0.85) -> np.ndarray:
    """Fixed point of the damped update by a dense solve of ``(I - alpha T^T) p = (1-alpha)/k``."""
    T = np.asarray(T, dtype=np.float64)
    k = T.shape[0]
    p = np.linalg.solve(np.eye(k) - alpha * T.T, np.full(k, (1.0 - alpha) / k))
    return p / p.sum()


@dataclass
class StateVector:
    participant_id: str
    period_start: dt.date | None
    period_end: dt.date | None
    values: np.ndarray
    n_iter: int = 0
    converged: bool = True
    threshold: float | None = None
    n_days: int = 0
    counts: np.ndarray | None = field(default=None, repr=False)


def participant_state_vector(points, labels, k: int, *, threshold: float | None = None,
                             threshold_quantile: float = 0.10, alpha: float = 0.85,
                             mode: str = "proximity", dates=None, max_iter: int = 100,
                             tol: float = 1e-8, participant_id: str = "",
                             period: tuple[dt.date, dt.date] | None = None) -> StateVector:
    """PageRank state vector for one participant's days in one period."""
    X = check_points(points, min_samples=1)
    if mode == "proximity" and threshold is None:
        threshold = default_threshold(X, threshold_quantile)
        if threshold is None:
            C = np.zeros((k, k))
        else:
            # duplicate-point clouds can give a zero quantile; keep exact ties linked
            threshold = max(threshold, np.finfo(float).tiny)
            C = count_transitions(X, labels, k, threshold, mode, dates)
    else:
        C = count_transitions(X, labels, k, threshold, mode, dates)
    pr = pagerank(normalize_rows(C), alpha=alpha, max_iter=max_iter, tol=tol)
    start, end = period if period is not None else (None, None)
    return StateVector(participant_id, start, end, pr.values, pr.n_iter, pr.converged,
                       threshold, X.shape[0], C)


def compute_state_vectors(keys, Y, labels, k: int, *, period_months: int | None = 3,
                          start_date: dt.date | None = None, **kwargs) -> list[StateVector]:
    """State vectors per participant and period, sorted by participant then period.

    With ``period_months=None`` each participant gets a single vector over all
    their days.  Periods with no days produce no vector.
    """
    Y = check_points(Y)
    labels = np.asarray(labels)
    by_pid: dict[str, list[int]] = {}
    for i, (pid, _) in enumerate(keys):
        by_pid.setdefault(pid, []).append(i)
    all_dates = [d for _, d in keys]
    out = []
    if period_months is None:
        groups = {(pid, None): idx for pid, idx in by_pid.items()}
        bounds = None
    else:
        start = start_date or min(all_dates)
        bounds = period_boundaries(start, max(all_dates), period_months)
        groups = {}
        for pid, idx in by_pid.items():
            for i in idx:
                if keys[i][1] < start:
                    continue
                groups.setdefault((pid, period_index(keys[i][1], bounds)), []).append(i)
    for (pid, pi) in sorted(groups, key=lambda g: (g[0], -1 if g[1] is None else g[1])):
        idx = sorted(groups[(pid, pi)], key=lambda i: keys[i][1])
        dates = [keys[i][1] for i in idx]
        period = (dates[0], dates[-1] + dt.timedelta(days=1)) if pi is None else (bounds[pi], bounds[pi + 1])
        out.append(participant_state_vector(Y[idx], labels[idx], k, dates=dates,
                                            participant_id=pid, period=period, **kwargs))
    return out


def state_columns(k: int) -> list[str]:
    return [f"state{i + 1}" for i in range(k)]


def write_states(path, vectors: Sequence[StateVector]) -> None:
    k = len(vectors[0].values) if vectors else 0
    header = ["participant_id", "period_start", "period_end", *state_columns(k), "iterations", "converged"]
    _io.write_csv(path, header, (
        [v.participant_id, v.period_start.isoformat(), v.period_end.isoformat(),
         *[float(x) for x in v.values], v.n_iter, v.converged] for v in vectors))


def read_states(path) -> list[StateVector]:
    header, rows = _io.read_csv(path)
    k = sum(1 for h in header if h.startswith("state"))
    out = []
    for r in rows:
        out.append(StateVector(r[0], dt.date.fromisoformat(r[1]), dt.date.fromisoformat(r[2]),
                               np.array([float(x) for x in r[3:3 + k]]), int(r[3 + k]),
                               r[4 + k] == "true"))
    return out


def transitions_json(vectors: Sequence[StateVector]) -> dict:
    out: dict = {}
    for v in vectors:
        C = v.counts
        out.setdefault(v.participant_id, {})[v.period_start.isoformat()] = {
            "period_end": v.period_end.isoformat(),
            "n_days": v.n_days,
            "threshold": v.threshold,
            "counts": C.tolist() if C is not None else None,
            "matrix": normalize_rows(C).tolist() if C is not None else None,
        }
    return out
