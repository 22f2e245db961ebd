"""k-means with k-means++ seeding, silhouette scoring and silhouette-based k selection."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform
from sklearn.base import BaseEstimator, ClusterMixin

from ._validation import ConfigError, DegenerateInputError, check_points

# relative slack for the per-iteration inertia monotonicity check
_INERTIA_SLACK = 1e-12


def _sq_dist_to_centres(X, C):
    return cdist(X, C, "sqeuclidean")


def kmeans_plusplus(X, k: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; returns ``k`` initial centres."""
    n = X.shape[0]
    centres = np.empty((k, X.shape[1]))
    centres[0] = X[rng.integers(n)]
    d2 = _sq_dist_to_centres(X, centres[:1])[:, 0]
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise DegenerateInputError(f"degenerate corpus: fewer than {k} distinct points")
        idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        idx = min(idx, n - 1)
        centres[c] = X[idx]
        d2 = np.minimum(d2, _sq_dist_to_centres(X, centres[c:c + 1])[:, 0])
    return centres


def _lloyd(X, centres, max_iter, tol):
    n, k = X.shape[0], centres.shape[0]
    rows = np.arange(n)
    labels = None
    history = []
    for it in range(max_iter):
        d2 = _sq_dist_to_centres(X, centres)
        new_labels = np.argmin(d2, axis=1)
        inertia = float(d2[rows, new_labels].sum())
        if history and inertia > history[-1] * (1 + _INERTIA_SLACK) + _INERTIA_SLACK:
            raise AssertionError(f"k-means inertia increased at iteration {it}: "
                                 f"{history[-1]!r} -> {inertia!r}")
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        for c in np.flatnonzero(counts == 0):
            # reseed at the point farthest from its current centre
            own = np.where(counts[labels] > 1, d2[rows, labels], -1.0)
            far = int(np.argmax(own))
            if own[far] <= 0:
                raise DegenerateInputError("degenerate corpus: cannot repair empty cluster")
            counts[labels[far]] -= 1
            counts[c] += 1
            labels[far] = c
        new_centres = np.vstack([X[labels == c].mean(axis=0) for c in range(k)])
        shift = float(((new_centres - centres) ** 2).sum())
        centres = new_centres
        if shift <= tol:
            break
    d2 = _sq_dist_to_centres(X, centres)
    final = np.argmin(d2, axis=1)
    if labels is None or not np.array_equal(final, labels):
        labels = final
        history.append(float(d2[rows, labels].sum()))
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        raise DegenerateInputError("degenerate corpus: empty cluster in final model")
    # final centres are exact means of the final assignment
    centres = np.vstack([X[labels == c].mean(axis=0) for c in range(k)])
    inertia = float(((X - centres[labels]) ** 2).sum())
    return centres, labels, inertia, history


class KMeans(ClusterMixin, BaseEstimator):
    """Lloyd's k-means from k-means++ starts, best of ``n_init`` restarts by inertia.

    Parameters
    ----------
    n_clusters : int, default=5
    n_init : int, default=10
    max_iter : int, default=300
    tol : float, default=1e-6
        Squared centroid shift below which iterations stop.
    random_state : int, default=0

    Attributes
    ----------
    cluster_centers_, labels_, inertia_, n_iter_, inertia_history_
    """

    def __init__(self, n_clusters=5, n_init=10, max_iter=300, tol=1e-6, random_state=0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_points(X)
        n, k = X.shape[0], int(self.n_clusters)
        if k < 2:
            raise ConfigError(f"n_clusters must be >= 2, got {k}")
        if n < k:
            raise ValueError(f"need at least n_clusters={k} points, got {n}")
        if np.all(X == X[0]):
            raise DegenerateInputError("degenerate corpus: all points identical")
        rng = np.random.default_rng(self.random_state)
        best = None
        for _ in range(self.n_init):
            centres = kmeans_plusplus(X, k, rng)
            result = _lloyd(X, centres, self.max_iter, self.tol)
            if best is None or result[2] < best[2]:
                best = result
        self.cluster_centers_, self.labels_, self.inertia_, self.inertia_history_ = best
        self.n_iter_ = len(self.inertia_history_)
        return self

    def predict(self, X):
        X = check_points(X)
        return np.argmin(_sq_dist_to_centres(X, self.cluster_centers_), axis=1)


def silhouette_from_distances(D, labels) -> float:
    """Mean silhouette from a full distance matrix; singleton points score 0."""
    labels = np.asarray(labels)
    uniq, inv = np.unique(labels, return_inverse=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least two clusters")
    n = len(labels)
    onehot = np.zeros((n, len(uniq)))
    onehot[np.arange(n), inv] = 1.0
    sizes = onehot.sum(axis=0)
    sums = D @ onehot  # distance from each point to every cluster, summed
    own = sizes[inv]
    a = np.where(own > 1, sums[np.arange(n), inv] / np.maximum(own - 1, 1), 0.0)
    other = sums / sizes
    other[np.arange(n), inv] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own <= 1] = 0.0
    return float(s.mean())


def silhouette(points, labels) -> float:
    """Mean Euclidean silhouette coefficient in ``[-1, 1]``."""
    X = check_points(points, min_samples=2)
    labels = np.asarray(labels)
    if labels.shape != (X.shape[0],):
        raise ValueError("labels must align with points")
    return silhouette_from_distances(squareform(pdist(X)), labels)


def parse_k_range(text: str) -> list[int]:
    """``"4:7"`` -> ``[4, 5, 6, 7]``."""
    lo, _, hi = text.partition(":")
    lo_i = int(lo)
    hi_i = int(hi) if hi else lo_i
    if hi_i < lo_i:
        raise ConfigError(f"empty k range {text!r}")
    return list(range(lo_i, hi_i + 1))


def select_k(points, k_range=(4, 5, 6, 7), seed=0, **kmeans_params):
    """Pick the k with the highest silhouette; ties go to the smaller k.

    Returns ``(k_best, scores, models)`` with ``scores`` and ``models`` keyed by k.
    """
    k_range = sorted(int(k) for k in k_range)
    if not k_range:
        raise ConfigError("empty k range")
    X = check_points(points)
    n = X.shape[0]
    if k_range[0] < 2 or k_range[-1] > n - 1:
        raise ConfigError(f"k range {k_range[0]}..{k_range[-1]} must lie within [2, {n - 1}]")
    D = squareform(pdist(X))
    scores, models = {}, {}
    for k in k_range:
        model = KMeans(n_clusters=k, random_state=seed, **kmeans_params).fit(X)
        models[k] = model
        scores[k] = silhouette_from_distances(D, model.labels_)
    best = max(k_range, key=lambda k: (scores[k], -k))
    return best, scores, models
