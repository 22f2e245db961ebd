"""Exact O(n^2) t-SNE to two dimensions.

Affinities are calibrated per point by bisection on the Gaussian precision
so each conditional row hits the target perplexity, then symmetrised.  The
layout is optimised with gradient descent, momentum, per-coordinate gains
and early exaggeration.  The gradient kernel is compiled with numba and runs
single-threaded with a fixed accumulation order, so a given seed always
yields the same bytes.
"""

from __future__ import annotations

import math

import numba
import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator

from . import _io
from ._validation import ConfigError, check_points

MAX_BISECTION_STEPS = 256
ENTROPY_TOL = 1e-5
ZERO_DISTANCE_JITTER = 1e-12


class AffinityError(RuntimeError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


def squared_distances(X) -> np.ndarray:
    X = check_points(X)
    return squareform(pdist(X, "sqeuclidean"))


@numba.njit(cache=True)
def _bisect_rows(Dn, target, tol, max_steps, P, beta, H, saturated):
    n = Dn.shape[0]
    row = np.empty(n)
    for i in range(n):
        ties = 0
        for j in range(n):
            if j != i and Dn[i, j] == 0.0:
                ties += 1
        if math.log(ties) >= target - tol:
            # the nearest distance is shared by so many points that no beta
            # reaches the target entropy; use the beta -> infinity limit
            for j in range(n):
                P[i, j] = 1.0 / ties if (j != i and Dn[i, j] == 0.0) else 0.0
            H[i] = math.log(ties)
            beta[i] = np.inf
            saturated[i] = True
            continue
        b = 1.0
        lo = -np.inf
        hi = np.inf
        for _ in range(max_steps):
            s = 0.0
            for j in range(n):
                row[j] = 0.0 if j == i else math.exp(-Dn[i, j] * b)
                s += row[j]
            acc = 0.0
            for j in range(n):
                row[j] /= s
                acc += Dn[i, j] * row[j]
            h = math.log(s) + b * acc
            H[i] = h
            beta[i] = b
            diff = h - target
            if abs(diff) <= tol:
                break
            if diff > 0.0:
                lo = b
                b = b * 2.0 if hi == np.inf else (b + hi) / 2.0
            else:
                hi = b
                b = b / 2.0 if lo == -np.inf else (b + lo) / 2.0
        for j in range(n):
            P[i, j] = row[j]


def conditional_affinities(D2, perplexity: float):
    """Row-conditional Gaussian affinities at the requested perplexity.

    Returns ``(P_cond, beta, entropy)`` where ``beta`` is the per-row
    precision ``1 / (2 sigma^2)`` and ``entropy`` the achieved row entropy
    in nats.  Raises :class:`AffinityError` naming the first row whose
    bisection did not reach ``log(perplexity)`` within 1e-5.  A row whose
    nearest distance is shared by at least ``perplexity`` points cannot reach
    the target; it gets the uniform limit over those points, ``beta = inf``,
    and its achieved entropy is reported as is.
    """
    D2 = np.array(D2, dtype=np.float64)
    n = D2.shape[0]
    if D2.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if n < 4:
        raise ValueError(f"need at least 4 points, got {n}")
    if not np.allclose(D2, D2.T, rtol=0, atol=1e-12 * max(1.0, float(np.abs(D2).max()))):
        raise ValueError("distance matrix must be symmetric")
    if np.any(np.diag(D2) != 0):
        raise ValueError("distance matrix must have a zero diagonal")
    if perplexity <= 1:
        raise ConfigError(f"perplexity must exceed 1, got {perplexity}")

    off = ~np.eye(n, dtype=bool)
    D2[off & (D2 <= 0)] = ZERO_DISTANCE_JITTER
    # shift each row by its nearest distance; entropy is invariant to it
    Dn = np.where(off, D2, np.inf)
    Dn -= Dn.min(axis=1, keepdims=True)
    np.fill_diagonal(Dn, 0.0)

    target = math.log(perplexity)
    P = np.zeros((n, n))
    beta = np.ones(n)
    H = np.zeros(n)
    saturated = np.zeros(n, dtype=np.bool_)
    # stop tight enough that perplexity itself is also within ENTROPY_TOL
    _bisect_rows(Dn, target, ENTROPY_TOL / max(1.0, perplexity) / 10.0,
                 MAX_BISECTION_STEPS, P, beta, H, saturated)

    err = np.where(saturated, 0.0, np.abs(H - target))
    if np.any(err > ENTROPY_TOL):
        row = int(np.argmax(err > ENTROPY_TOL))
        raise AffinityError(row, f"bisection did not bracket perplexity {perplexity} "
                                 f"in {MAX_BISECTION_STEPS} steps (entropy error {err[row]:.3g})")
    return P, beta, H


def calibrate_affinities(D2, perplexity: float = 30.0) -> np.ndarray:
    """Symmetrised joint affinities ``(P_cond + P_cond.T) / (2n)`` summing to one."""
    P, _, _ = conditional_affinities(D2, perplexity)
    n = P.shape[0]
    return (P + P.T) / (2.0 * n)


def q_matrix(Y) -> np.ndarray:
    """Student-t joint similarities of a layout."""
    Y = np.asarray(Y, dtype=np.float64)
    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    return num / num.sum()


def kl_divergence(P, Y) -> float:
    """``KL(P || Q(Y))`` in nats, straightforward dense evaluation."""
    P = np.asarray(P, dtype=np.float64)
    Q = q_matrix(Y)
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


@numba.njit(cache=True)
def _gradient_kernel(P, Y, exaggeration, grad, want_kl):
    n = Y.shape[0]
    attr = np.zeros((n, 2))
    rep = np.zeros((n, 2))
    Z = 0.0
    plogw = 0.0
    for i in range(n):
        yi0 = Y[i, 0]
        yi1 = Y[i, 1]
        for j in range(i + 1, n):
            dx = yi0 - Y[j, 0]
            dy = yi1 - Y[j, 1]
            w = 1.0 / (1.0 + dx * dx + dy * dy)
            Z += 2.0 * w
            p = P[i, j]
            pw = p * w
            ww = w * w
            attr[i, 0] += pw * dx
            attr[i, 1] += pw * dy
            attr[j, 0] -= pw * dx
            attr[j, 1] -= pw * dy
            rep[i, 0] += ww * dx
            rep[i, 1] += ww * dy
            rep[j, 0] -= ww * dx
            rep[j, 1] -= ww * dy
            if want_kl and p > 0.0:
                plogw += 2.0 * p * math.log(w)
    for i in range(n):
        grad[i, 0] = 4.0 * (exaggeration * attr[i, 0] - rep[i, 0] / Z)
        grad[i, 1] = 4.0 * (exaggeration * attr[i, 1] - rep[i, 1] / Z)
    return Z, plogw


def tsne_gradient(P, Y, exaggeration: float = 1.0) -> np.ndarray:
    """Analytic gradient of ``KL(exaggeration * P || Q)`` with respect to ``Y``."""
    P = np.ascontiguousarray(P, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    grad = np.empty_like(Y)
    _gradient_kernel(P, Y, float(exaggeration), grad, False)
    return grad


class TSNE(BaseEstimator):
    """Exact t-SNE embedding into the plane.

    Parameters
    ----------
    perplexity : float, default=30
        Must satisfy ``perplexity < (n_samples - 1) / 3`` at fit time.
    n_iter : int, default=1000
    learning_rate : float, default=200
    early_exaggeration : float, default=12
    exaggeration_iters : int, default=250
        Iterations run with exaggerated affinities.
    momentum_switch_iter : int, default=250
        Momentum is 0.5 before this iteration and 0.8 from it on.
    init_std : float, default=1e-4
        Standard deviation of the seeded Gaussian initial layout.
    kl_every : int, default=50
        Stride for the KL trace; the start, end of exaggeration and final
        iteration are always recorded.
    random_state : int, default=0
    callback : callable, optional
        Called as ``callback(iteration, Y)`` after each update.

    Attributes
    ----------
    embedding_ : ndarray of shape (n_samples, 2)
    kl_trace_ : list of (iteration, kl)
        KL divergence of the unexaggerated affinities after ``iteration``
        updates.
    """

    def __init__(self, perplexity=30.0, n_iter=1000, learning_rate=200.0, early_exaggeration=12.0,
                 exaggeration_iters=250, momentum_switch_iter=250, init_std=1e-4, kl_every=50,
                 random_state=0, callback=None):
        self.perplexity = perplexity
        self.n_iter = n_iter
        self.learning_rate = learning_rate
        self.early_exaggeration = early_exaggeration
        self.exaggeration_iters = exaggeration_iters
        self.momentum_switch_iter = momentum_switch_iter
        self.init_std = init_std
        self.kl_every = kl_every
        self.random_state = random_state
        self.callback = callback

    def _check_params(self, n):
        if self.perplexity <= 1:
            raise ConfigError(f"perplexity must exceed 1, got {self.perplexity}")
        if not self.perplexity < (n - 1) / 3:
            raise ConfigError(f"perplexity {self.perplexity} infeasible for {n} points; "
                              f"need perplexity < {(n - 1) / 3:.4g}")
        if self.n_iter < 0:
            raise ConfigError("n_iter must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.early_exaggeration < 1:
            raise ConfigError("early_exaggeration must be >= 1")

    def fit(self, X, y=None):
        X = check_points(X, min_samples=4)
        n = X.shape[0]
        self._check_params(n)
        P = np.ascontiguousarray(calibrate_affinities(squared_distances(X), self.perplexity))
        self.fit_affinities(P)
        return self

    def fit_affinities(self, P):
        """Optimise a layout for precomputed joint affinities ``P``."""
        P = np.ascontiguousarray(P, dtype=np.float64)
        n = P.shape[0]
        rng = np.random.default_rng(self.random_state)
        Y = rng.normal(0.0, self.init_std, size=(n, 2))
        mask = P > 0
        p_log_p = float(np.sum(P[mask] * np.log(P[mask])))
        p_sum = float(P.sum())

        grad = np.empty_like(Y)
        update = np.zeros_like(Y)
        gains = np.ones_like(Y)
        trace = []

        def record(it, want):
            if want:
                Z, plogw = _gradient_kernel(P, Y, 1.0, grad, True)
                trace.append((it, p_log_p - plogw + p_sum * math.log(Z)))

        checkpoints = {0, min(self.exaggeration_iters, self.n_iter), self.n_iter}
        for it in range(self.n_iter):
            if it in checkpoints or (self.kl_every and it % self.kl_every == 0):
                record(it, True)
            exag = self.early_exaggeration if it < self.exaggeration_iters else 1.0
            momentum = 0.5 if it < self.momentum_switch_iter else 0.8
            _gradient_kernel(P, Y, exag, grad, False)
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite t-SNE gradient at iteration {it}")
            same_sign = np.sign(grad) == np.sign(update)
            gains = np.where(same_sign, gains * 0.8, gains + 0.2)
            np.maximum(gains, 0.01, out=gains)
            update = momentum * update - self.learning_rate * gains * grad
            Y += update
            Y -= Y.mean(axis=0)
            if self.callback is not None:
                self.callback(it + 1, Y)
        record(self.n_iter, True)

        self.embedding_ = Y
        self.kl_trace_ = trace
        self.n_iter_ = self.n_iter
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_

    def kl_at(self, iteration: int) -> float:
        for it, kl in self.kl_trace_:
            if it == iteration:
                return kl
        raise KeyError(f"KL not recorded at iteration {iteration}")


def write_points(path, keys, Y) -> None:
    _io.write_csv(path, ["participant_id", "date", "x", "y"],
                  ([pid, d.isoformat(), float(x), float(y)] for (pid, d), (x, y) in zip(keys, Y)))


def read_points(path):
    import datetime as dt
    header, rows = _io.read_csv(path)
    if header[:4] != ["participant_id", "date", "x", "y"]:
        raise ValueError("points file must have columns participant_id,date,x,y")
    keys = [(r[0], dt.date.fromisoformat(r[1])) for r in rows]
    Y = np.array([[float(r[2]), float(r[3])] for r in rows]).reshape(-1, 2)
    return keys, Y


def write_kl_trace(path, trace) -> None:
    _io.write_csv(path, ["iteration", "kl"], ([it, float(kl)] for it, kl in trace))

