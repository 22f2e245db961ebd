"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value (window size, ranges, hyperparameters)."""


class DegenerateInputError(ValueError):
    """Input that makes an algorithm ill-posed (e.g. identical points)."""


def check_points(X, *, min_samples: int = 1, name: str = "X") -> np.ndarray:
    """Return ``X`` as a finite 2-D float64 array with at least ``min_samples`` rows."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[0] < min_samples:
        raise ValueError(f"{name} needs at least {min_samples} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        bad = int(np.argwhere(~np.isfinite(X))[0, 0])
        raise ValueError(f"{name} contains NaN or Inf (first at row {bad})")
    return X


def check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels.astype(np.int64)


def check_stochastic(T, atol: float = 1e-9) -> np.ndarray:
    """Validate a square row-stochastic matrix."""
    T = np.asarray(T, dtype=np.float64)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"transition matrix must be square, got shape {T.shape}")
    if not np.all(np.isfinite(T)) or np.any(T < 0):
        raise ValueError("transition matrix entries must be finite and non-negative")
    rows = T.sum(axis=1)
    if not np.allclose(rows, 1.0, rtol=0, atol=atol):
        worst = int(np.argmax(np.abs(rows - 1.0)))
        raise ValueError(f"transition matrix is not row-stochastic (row {worst} sums to {rows[worst]!r})")
    return T


def rng_from_seed(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
