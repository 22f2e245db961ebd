"""Feature sets, closed-form ridge regression, LOOCV and bootstrap intervals.

Every fold standardises and fits on its training rows only.  When a penalty
grid is given, the penalty is picked per fold by exact leave-one-out on that
fold's (already standardised) training rows.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import _io
from ._validation import ConfigError
from .ingest import ClinicalRecord
from .preprocess import NOWHERE, DailyActivitySequence, slot_vocabulary
from .transition import participant_state_vector

SELECTORS = ("baseline", "proportion_baseline", "random_word", "state", "characteristics")
_ALIASES = {"proportion": "proportion_baseline", "randomword": "random_word", "random": "random_word",
            "chars": "characteristics", "states": "state"}
TARGETS = {"mmse": "mmse", "adascog": "adas_cog", "delta_mmse": "delta_mmse", "delta_adascog": "delta_adas"}
DELTA_TARGETS = ("delta_mmse", "delta_adascog")
DEFAULT_WINDOWS = (7, 15, 30, 90, 180)
DEFAULT_LAMBDAS = (0.01, 0.1, 1.0, 10.0)
REPORT_COLUMNS = ("model", "feature_set", "target", "window_days", "mae", "mae_lo", "mae_hi",
                  "rmse", "rmse_lo", "rmse_hi", "n")


@dataclass(frozen=True)
class FeatureSetSpec:
    selectors: frozenset
    include_current_scores: bool = False
    random_word_seed: int = 0

    @classmethod
    def parse(cls, text: str, **kwargs) -> "FeatureSetSpec":
        parts = []
        for raw in text.lower().split("+"):
            name = _ALIASES.get(raw.strip(), raw.strip())
            if name not in SELECTORS:
                raise ConfigError(f"unknown feature set {raw!r}; choose from {', '.join(SELECTORS)}")
            parts.append(name)
        if not parts:
            raise ConfigError("empty feature set")
        return cls(frozenset(parts), **kwargs)

    @property
    def name(self) -> str:
        base = "+".join(s for s in SELECTORS if s in self.selectors)
        return base + "+current_scores" if self.include_current_scores else base


@dataclass
class DesignMatrix:
    rows: list[str]
    columns: list[str]
    X: np.ndarray
    y: np.ndarray | None = None
    excluded: dict[str, str] = field(default_factory=dict)


# -- activity features ---------------------------------------------------------

def window_days(days: Sequence[DailyActivitySequence], n_days: int | None) -> list[DailyActivitySequence]:
    """Days within the last ``n_days`` calendar days of the participant's data."""
    days = sorted(days, key=lambda s: s.date)
    if n_days is None or not days:
        return days
    first = days[-1].date - dt.timedelta(days=n_days - 1)
    return [s for s in days if s.date >= first]


def _active_locations(vocabulary) -> list[str]:
    return [t for t in vocabulary if t != NOWHERE]


def daily_counts(days: Sequence[DailyActivitySequence], vocabulary=None) -> np.ndarray:
    locs = _active_locations(vocabulary or slot_vocabulary())
    index = {t: i for i, t in enumerate(locs)}
    out = np.zeros((len(days), len(locs)))
    for r, s in enumerate(days):
        for t in s.slots:
            if t in index:
                out[r, index[t]] += 1
    return out


def baseline_features(days, vocabulary=None) -> dict[str, float]:
    """Per-location daily slot-count mean and (population) variance."""
    locs = _active_locations(vocabulary or slot_vocabulary())
    C = daily_counts(days, vocabulary)
    out = {}
    for j, loc in enumerate(locs):
        out[f"{loc}_count_mean"] = float(C[:, j].mean())
        out[f"{loc}_count_var"] = float(C[:, j].var())
    return out


def daily_proportions(days, vocabulary=None) -> np.ndarray:
    """Per-day location shares among occupied slots; days with none are dropped."""
    C = daily_counts(days, vocabulary)
    tot = C.sum(axis=1)
    return C[tot > 0] / tot[tot > 0, None]


def proportion_features(days, vocabulary=None) -> dict[str, float]:
    locs = _active_locations(vocabulary or slot_vocabulary())
    F = daily_proportions(days, vocabulary)
    if F.shape[0] == 0:
        F = np.zeros((1, len(locs)))
    out = {}
    for j, loc in enumerate(locs):
        out[f"{loc}_prop_mean"] = float(F[:, j].mean())
        out[f"{loc}_prop_var"] = float(F[:, j].var())
    return out


def random_word_values(seed: int, vocabulary=None) -> dict[str, float]:
    """Seeded map from each slot token to a uniform random number."""
    vocab = sorted(vocabulary or slot_vocabulary())
    draws = np.random.default_rng(seed).random(len(vocab))
    return dict(zip(vocab, draws.tolist()))


def random_word_features(days, seed: int, vocabulary=None) -> dict[str, float]:
    """Mean and variance across days of each day's mean token value."""
    values = random_word_values(seed, vocabulary)
    scores = np.array([np.mean([values[t] for t in s.slots]) for s in days]) if days else np.zeros(1)
    return {"random_word_mean": float(scores.mean()), "random_word_var": float(scores.var())}


def characteristics_features(rec: ClinicalRecord, categories: Mapping[str, Sequence[str]],
                             include_current_scores: bool) -> dict[str, float]:
    needed = ["age", "hads_depression", "hads_anxiety", "lives_alone", "gender", "diagnosis"]
    if include_current_scores:
        needed += ["mmse", "adas_cog"]
    missing = [f for f in needed if getattr(rec, f) is None]
    if missing:
        raise KeyError(f"missing clinical field(s): {', '.join(missing)}")
    out = {"age": float(rec.age), "hads_depression": float(rec.hads_depression),
           "hads_anxiety": float(rec.hads_anxiety), "lives_alone": float(bool(rec.lives_alone))}
    for cat in ("gender", "diagnosis"):
        for level in categories[cat]:
            out[f"{cat}_{level}"] = float(getattr(rec, cat) == level)
    if include_current_scores:
        out["current_mmse"] = float(rec.mmse)
        out["current_adas_cog"] = float(rec.adas_cog)
    return out


def assemble_features(days_by_pid: Mapping[str, Sequence[DailyActivitySequence]],
                      states_by_pid: Mapping[str, np.ndarray] | None,
                      clinical: Mapping[str, ClinicalRecord], spec: FeatureSetSpec,
                      target: str | None = None, window: int | None = None,
                      vocabulary=None) -> DesignMatrix:
    """Build the design matrix for one feature set (and optionally one target).

    Participants lacking any required input are left out and listed in
    ``excluded`` with the reason; nothing is imputed.
    """
    if target is not None and target not in TARGETS:
        raise ConfigError(f"unknown target {target!r}; choose from {', '.join(TARGETS)}")
    pids = sorted(set(days_by_pid) | set(clinical) | set(states_by_pid or {}))
    sel = spec.selectors
    categories = {c: sorted({getattr(r, c) for r in clinical.values() if getattr(r, c) is not None})
                  for c in ("gender", "diagnosis")}
    rows, feats, ys, excluded = [], [], [], {}
    for p in pids:
        f: dict[str, float] = {}
        try:
            days = window_days(days_by_pid.get(p, []), window)
            if sel & {"baseline", "proportion_baseline", "random_word"} and not days:
                raise KeyError("no activity days")
            if "baseline" in sel:
                f.update(baseline_features(days, vocabulary))
            if "proportion_baseline" in sel:
                f.update(proportion_features(days, vocabulary))
            if "random_word" in sel:
                f.update(random_word_features(days, spec.random_word_seed, vocabulary))
            if "state" in sel:
                if not states_by_pid or p not in states_by_pid:
                    raise KeyError("no state vector")
                f.update({f"state{i + 1}": float(v) for i, v in enumerate(states_by_pid[p])})
            if "characteristics" in sel or target is not None:
                if p not in clinical:
                    raise KeyError("no clinical record")
            if "characteristics" in sel:
                f.update(characteristics_features(clinical[p], categories, spec.include_current_scores))
            if target is not None:
                y = getattr(clinical[p], TARGETS[target])
                if y is None:
                    raise KeyError(f"target {target} missing")
                ys.append(float(y))
        except KeyError as exc:
            excluded[p] = str(exc.args[0])
            continue
        rows.append(p)
        feats.append(f)
    columns = list(feats[0]) if feats else []
    X = np.array([[f[c] for c in columns] for f in feats]).reshape(len(rows), len(columns))
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite value in assembled features")
    return DesignMatrix(rows, columns, X, np.array(ys) if target is not None else None, excluded)


# -- ridge -----------------------------------------------------------------------

def ridge_fit(X, y, lam: float) -> tuple[np.ndarray, float]:
    """Minimise ``|y - Xw - b|^2 + lam |w|^2`` with an unpenalised intercept."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if lam < 0:
        raise ConfigError(f"ridge penalty must be non-negative, got {lam}")
    n, p = X.shape
    if n < 2:
        raise ValueError("ridge needs at least two samples")
    xm = X.mean(axis=0)
    ym = y.mean()
    Xc = X - xm
    if p == 0:
        return np.zeros(0), float(ym)
    A = Xc.T @ Xc + lam * np.eye(p)
    if lam == 0 and np.linalg.matrix_rank(A) < p:
        raise np.linalg.LinAlgError("singular normal equations at lambda=0 (collinear features); use lambda > 0")
    w = np.linalg.solve(A, Xc.T @ (y - ym))
    return w, float(ym - xm @ w)


def loo_residuals(X, y, lam: float) -> np.ndarray:
    """Exact leave-one-out residuals of :func:`ridge_fit` via the hat matrix."""
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    Z = np.hstack([np.ones((n, 1)), X])
    D = np.diag(np.r_[0.0, np.full(p, lam)])
    H = Z @ np.linalg.solve(Z.T @ Z + D, Z.T)
    resid = y - H @ y
    return resid / (1.0 - np.diag(H))


class RidgeRegression(RegressorMixin, BaseEstimator):
    """Ridge regression on standardised features.

    Parameters
    ----------
    alpha : float, default=1.0
        Penalty used when ``alphas`` is None.
    alphas : sequence of float, optional
        Candidate penalties; the one with the lowest exact leave-one-out MSE
        on the training rows is used (ties go to the larger penalty).
    standardize : bool, default=True
        Scale columns to mean 0 / sd 1 with training statistics.  Constant
        columns are dropped and listed in ``dropped_columns_``.
    """

    def __init__(self, alpha=1.0, alphas=None, standardize=True):
        self.alpha = alpha
        self.alphas = alphas
        self.standardize = standardize

    def _scale(self, X):
        Z = (X - self.mean_) / self.scale_ if self.standardize else X
        return Z[:, self.keep_]

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be 2-D with one row per target value")
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.keep_ = sd > 0
        self.scale_ = np.where(self.keep_, sd, 1.0)
        self.dropped_columns_ = np.flatnonzero(~self.keep_).tolist()
        Z = self._scale(X)
        alpha = self.alpha
        if self.alphas is not None and Z.shape[1] > 0 and X.shape[0] > 2:
            best = None
            for a in sorted(self.alphas, reverse=True):
                mse = float(np.mean(loo_residuals(Z, y, a) ** 2))
                if best is None or mse < best[0]:
                    best = (mse, a)
            alpha = best[1]
        self.alpha_ = alpha
        self.coef_, self.intercept_ = ridge_fit(Z, y, alpha)
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=np.float64)
        return self._scale(X) @ self.coef_ + self.intercept_


@dataclass
class LoocvResult:
    predictions: np.ndarray
    y: np.ndarray
    alphas: list[float]

    @property
    def abs_errors(self) -> np.ndarray:
        return np.abs(self.predictions - self.y)

    @property
    def sq_errors(self) -> np.ndarray:
        return (self.predictions - self.y) ** 2

    @property
    def mae(self) -> float:
        return mean_of(self.abs_errors)

    @property
    def rmse(self) -> float:
        # scale by the largest error so tiny or huge errors do not under/overflow when squared
        e = self.abs_errors
        top = float(e.max()) if len(e) else 0.0
        if top == 0.0 or not np.isfinite(top):
            return top
        return top * float(np.sqrt(mean_of((e / top) ** 2)))


def mean_of(values) -> float:
    return float(np.sum(np.sort(np.asarray(values, dtype=np.float64))) / len(values))


def loocv_evaluate(X, y, lam: float | Sequence[float] = 1.0) -> LoocvResult:
    """Leave-one-out predictions; each fold standardises and fits on its own training rows."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n < 3:
        raise ValueError(f"LOOCV needs at least 3 rows, got {n}")
    grid = None if np.isscalar(lam) else tuple(lam)
    preds = np.empty(n)
    alphas = []
    for i in range(n):
        train = np.arange(n) != i
        model = RidgeRegression(alpha=lam if grid is None else 1.0, alphas=grid).fit(X[train], y[train])
        preds[i] = model.predict(X[i:i + 1])[0]
        alphas.append(model.alpha_)
    return LoocvResult(preds, y, alphas)


def bootstrap_ci(abs_errors, sq_errors, n_resamples: int = 1000, seed=0, level: float = 0.95):
    """Percentile bootstrap over fold errors.

    Resample ``r`` draws from its own generator seeded with ``(seed, r)``, so
    results do not depend on evaluation order.  Returns
    ``((mae_lo, mae_hi), (rmse_lo, rmse_hi))``.
    """
    if n_resamples <= 0:
        raise ConfigError(f"n_resamples must be positive, got {n_resamples}")
    a = np.asarray(abs_errors, dtype=np.float64)
    s = np.asarray(sq_errors, dtype=np.float64)
    n = len(a)
    if n < 3 or len(s) != n:
        raise ValueError("need at least three paired fold errors")
    maes = np.empty(n_resamples)
    rmses = np.empty(n_resamples)
    for r in range(n_resamples):
        idx = np.random.default_rng([int(seed), r]).integers(0, n, size=n)
        maes[r] = mean_of(a[idx])
        rmses[r] = np.sqrt(mean_of(s[idx]))
    q = [50 * (1 - level), 50 * (1 + level)]
    m_lo, m_hi = np.percentile(maes, q)
    r_lo, r_hi = np.percentile(rmses, q)
    return (float(m_lo), float(m_hi)), (float(r_lo), float(r_hi))


# -- experiment grid --------------------------------------------------------------

@dataclass
class PredictionRow:
    model: str
    feature_set: str
    target: str
    window_days: int | None
    mae: float
    mae_lo: float
    mae_hi: float
    rmse: float
    rmse_lo: float
    rmse_hi: float
    n: int
    participants: list[str] = field(default_factory=list)
    predictions: list[float] = field(default_factory=list)
    excluded: dict[str, str] = field(default_factory=dict)
    alphas: list[float] = field(default_factory=list)

    def csv_row(self) -> list:
        return [getattr(self, c) for c in REPORT_COLUMNS]


def expand_specs(specs: Sequence[FeatureSetSpec], target: str) -> list[FeatureSetSpec]:
    """Delta targets run characteristics sets both with and without current scores."""
    out = []
    for spec in specs:
        if target in DELTA_TARGETS and "characteristics" in spec.selectors:
            for flag in (False, True):
                out.append(FeatureSetSpec(spec.selectors, flag, spec.random_word_seed))
        else:
            out.append(FeatureSetSpec(spec.selectors, False, spec.random_word_seed))
    return out


def evaluate_design(design: DesignMatrix, spec_name: str, target: str, window, lambdas,
                    n_resamples: int, seed) -> PredictionRow:
    res = loocv_evaluate(design.X, design.y, lambdas)
    (m_lo, m_hi), (r_lo, r_hi) = bootstrap_ci(res.abs_errors, res.sq_errors, n_resamples, seed)
    return PredictionRow("ridge", spec_name, target, window, res.mae, m_lo, m_hi, res.rmse, r_lo, r_hi,
                         len(design.rows), design.rows, res.predictions.tolist(), design.excluded, res.alphas)


def run_experiment_grid(days_by_pid, state_source: Callable[[int | None], Mapping[str, np.ndarray]] | None,
                        clinical: Mapping[str, ClinicalRecord], specs: Sequence[FeatureSetSpec],
                        targets: Sequence[str], windows: Sequence[int | None] = DEFAULT_WINDOWS,
                        lambdas: float | Sequence[float] = DEFAULT_LAMBDAS, n_resamples: int = 1000,
                        seed=0, vocabulary=None) -> list[PredictionRow]:
    """Cross feature sets x targets x analysis windows; one report row per cell."""
    rows = []
    for window in windows:
        states = state_source(window) if state_source is not None else None
        for target in targets:
            for spec in expand_specs(specs, target):
                design = assemble_features(days_by_pid, states, clinical, spec, target, window, vocabulary)
                if len(design.rows) < 3:
                    raise ValueError(f"{spec.name}/{target}/{window}d: only {len(design.rows)} usable participants")
                rows.append(evaluate_design(design, spec.name, target, window, lambdas, n_resamples, seed))
    for r in rows:
        if r.mae > r.rmse * (1 + 1e-12):
            raise AssertionError(f"MAE {r.mae} exceeds RMSE {r.rmse} for {r.feature_set}/{r.target}")
    return rows


def window_state_source(keys, Y, labels, k: int, **state_kwargs):
    """State vectors recomputed over each participant's last ``window`` days."""
    by_pid: dict[str, list[int]] = {}
    for i, (pid, _) in enumerate(keys):
        by_pid.setdefault(pid, []).append(i)
    Y = np.asarray(Y)
    labels = np.asarray(labels)

    def source(window):
        out = {}
        for pid in sorted(by_pid):
            idx = sorted(by_pid[pid], key=lambda i: keys[i][1])
            if window is not None:
                first = keys[idx[-1]][1] - dt.timedelta(days=window - 1)
                idx = [i for i in idx if keys[i][1] >= first]
            dates = [keys[i][1] for i in idx]
            out[pid] = participant_state_vector(Y[idx], labels[idx], k, dates=dates, **state_kwargs).values
        return out
    return source


def period_state_source(vectors):
    """State vectors averaged over the stored periods overlapping each window."""
    by_pid: dict[str, list] = {}
    for v in vectors:
        by_pid.setdefault(v.participant_id, []).append(v)

    def source(window):
        out = {}
        for pid, vs in sorted(by_pid.items()):
            vs = sorted(vs, key=lambda v: v.period_start)
            if window is not None:
                last = vs[-1].period_end
                first = last - dt.timedelta(days=window)
                vs = [v for v in vs if v.period_end > first]
            out[pid] = np.mean([v.values for v in vs], axis=0)
        return out
    return source


def write_report(csv_path, json_path, rows: Sequence[PredictionRow], metadata: dict | None = None) -> None:
    _io.write_csv(csv_path, REPORT_COLUMNS, (r.csv_row() for r in rows))
    if json_path is not None:
        _io.write_json(json_path, {
            "metadata": metadata or {},
            "rows": [{**{c: getattr(r, c) for c in REPORT_COLUMNS},
                      "participants": r.participants, "predictions": r.predictions,
                      "alphas": r.alphas, "excluded": r.excluded} for r in rows],
        })
