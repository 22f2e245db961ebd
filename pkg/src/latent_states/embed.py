"""Day embeddings, cluster-based triplet selection and Manhattan triplet loss.

The built-in embedder is a deterministic, training-free stand-in for a
fine-tuned sentence encoder.  Vectors from an external encoder can be
imported from CSV (``participant_id,date,v0..v{d-1}``) instead.
"""

from __future__ import annotations

import datetime as dt
import zlib
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import _io
from ._validation import ConfigError
from .preprocess import DailyActivitySequence, slot_vocabulary

N_BANDS = 6
DayKey = tuple[str, dt.date]


@dataclass
class EmbeddingCorpus:
    """Day keys and their vectors; row ``i`` of ``values`` belongs to ``keys[i]``."""

    keys: list[DayKey]
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return int(self.values.shape[1]) if self.values.ndim == 2 else 0

    def lookup(self) -> dict[DayKey, int]:
        return {k: i for i, k in enumerate(self.keys)}


def _bigram_bucket(a: str, b: str, m: int) -> int:
    return zlib.crc32(f"{a}\x1f{b}".encode()) % m


def builtin_embed(sequence: DailyActivitySequence, dim: int = 384,
                  vocabulary: Sequence[str] | None = None) -> np.ndarray:
    """Embed one day as ``[slot shares | 4-hour band shares | hashed bigrams]``.

    Each block is L1-normalised to unit mass and the full vector is then
    L2-normalised.  A vector with no mass at all is returned as zeros.
    """
    vocab = tuple(vocabulary) if vocabulary is not None else slot_vocabulary()
    V = len(vocab)
    if dim < V * (1 + N_BANDS):
        raise ConfigError(f"dim={dim} cannot hold {V * (1 + N_BANDS)} count and band coordinates")
    index = {t: i for i, t in enumerate(vocab)}
    slots = sequence.slots
    n = len(slots)
    try:
        tok = np.array([index[t] for t in slots], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None

    out = np.zeros(dim)
    if n:
        out[:V] = np.bincount(tok, minlength=V) / n
        band = (np.arange(n) * N_BANDS) // n
        hist = np.zeros((N_BANDS, V))
        np.add.at(hist, (band, tok), 1.0)
        hist /= hist.sum()
        out[V:V * (1 + N_BANDS)] = hist.reshape(-1)
    m = dim - V * (1 + N_BANDS)
    if m and n > 1:
        tail = np.zeros(m)
        for a, b in zip(slots[:-1], slots[1:]):
            tail[_bigram_bucket(a, b, m)] += 1.0
        out[V * (1 + N_BANDS):] = tail / (n - 1)
    norm = np.linalg.norm(out)
    return out / norm if norm > 0 else out


class BuiltinEmbedder(TransformerMixin, BaseEstimator):
    """Stateless transformer applying :func:`builtin_embed` to each day.

    ``n_zero_`` counts days whose vector had no mass and was left at zero.
    """

    def __init__(self, dim=384, vocabulary=None):
        self.dim = dim
        self.vocabulary = vocabulary

    def fit(self, sequences=None, y=None):
        return self

    def transform(self, sequences):
        seqs = list(sequences)
        out = np.zeros((len(seqs), self.dim))
        for i, s in enumerate(seqs):
            out[i] = builtin_embed(s, self.dim, self.vocabulary)
        self.n_zero_ = int(np.sum(~out.any(axis=1)))
        return out

    def embed_corpus(self, sequences) -> EmbeddingCorpus:
        seqs = list(sequences)
        return EmbeddingCorpus([s.key for s in seqs], self.transform(seqs))


def write_embeddings(path, corpus: EmbeddingCorpus) -> None:
    header = ["participant_id", "date"] + [f"v{j}" for j in range(corpus.dim)]
    _io.write_csv(path, header, ([pid, d.isoformat(), *row.tolist()]
                                 for (pid, d), row in zip(corpus.keys, corpus.values)))


def import_embeddings(path) -> EmbeddingCorpus:
    """Read an embedding CSV; rejects ragged rows and non-finite entries."""
    header, rows = _io.read_csv(path)
    if header[:2] != ["participant_id", "date"]:
        raise ValueError("embedding file must start with columns participant_id,date")
    dim = len(header) - 2
    keys, values = [], []
    for i, row in enumerate(rows):
        line = i + 2
        if len(row) - 2 != dim:
            raise ValueError(f"line {line}: dimension mismatch, expected {dim} values, got {len(row) - 2}")
        try:
            vec = np.array([float(x) for x in row[2:]])
        except ValueError:
            raise ValueError(f"line {line}: non-numeric embedding value") from None
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"line {line}: NaN or Inf in embedding for {row[0]} {row[1]}")
        keys.append((row[0], dt.date.fromisoformat(row[1])))
        values.append(vec)
    arr = np.vstack(values) if values else np.zeros((0, dim))
    return EmbeddingCorpus(keys, arr)


# -- triplets ----------------------------------------------------------------

class Triplet(NamedTuple):
    anchor: DayKey
    positive: DayKey
    negative: DayKey


def _positive_lists(keys: Sequence[DayKey], labels: np.ndarray, window_days: int):
    """CSR-style eligible-positive lists per day index."""
    n = len(keys)
    by_pid: dict[str, list[int]] = {}
    for i, (pid, _) in enumerate(keys):
        by_pid.setdefault(pid, []).append(i)
    ordinals = np.array([d.toordinal() for _, d in keys], dtype=np.int64)
    lists: list[np.ndarray] = [np.zeros(0, dtype=np.int64)] * n
    for pid in sorted(by_pid):
        idx = np.array(by_pid[pid], dtype=np.int64)
        idx = idx[np.argsort(ordinals[idx], kind="stable")]
        od = ordinals[idx]
        lo = np.searchsorted(od, od - window_days, side="left")
        hi = np.searchsorted(od, od + window_days, side="right")
        for a in range(len(idx)):
            cand = idx[lo[a]:hi[a]]
            cand = cand[(cand != idx[a]) & (labels[cand] == labels[idx[a]])]
            lists[idx[a]] = np.sort(cand)
    return lists


def select_triplets(keys: Sequence[DayKey], labels, window_days: int = 30, n: int = 50000,
                    seed=0) -> tuple[list[Triplet], int]:
    """Sample ``n`` triplets by the same-participant / window / same-cluster rule.

    Returns ``(triplets, skipped)`` where ``skipped`` counts anchor days with no
    eligible positive (or, in a one-cluster one-participant corpus, no
    eligible negative).
    """
    if n <= 0:
        raise ConfigError(f"n must be positive, got {n}")
    keys = list(keys)
    if not keys:
        raise ValueError("empty corpus")
    labels = np.asarray(labels)
    if labels.shape != (len(keys),):
        raise ValueError("labels must align with keys")
    N = len(keys)
    pos = _positive_lists(keys, labels, window_days)
    counts = np.array([len(p) for p in pos])
    eligible = np.flatnonzero((counts > 0) & (N - 1 - counts > 0))
    skipped = N - len(eligible)
    if len(eligible) == 0:
        return [], skipped

    rng = np.random.default_rng(seed)
    anchors = eligible[rng.integers(0, len(eligible), size=n)]
    offsets = np.floor(rng.random(n) * counts[anchors]).astype(np.int64)
    positives = np.array([pos[a][o] for a, o in zip(anchors, offsets)], dtype=np.int64)

    pids = np.array([k[0] for k in keys])
    ordinals = np.array([d.toordinal() for _, d in keys], dtype=np.int64)

    def is_positive_like(a, c):
        return ((c == a) | ((pids[c] == pids[a]) & (labels[c] == labels[a])
                            & (np.abs(ordinals[c] - ordinals[a]) <= window_days)))

    negatives = rng.integers(0, N, size=n)
    bad = np.flatnonzero(is_positive_like(anchors, negatives))
    while bad.size:
        negatives[bad] = rng.integers(0, N, size=bad.size)
        bad = bad[is_positive_like(anchors[bad], negatives[bad])]

    triplets = [Triplet(keys[a], keys[p], keys[q]) for a, p, q in zip(anchors, positives, negatives)]
    return triplets, skipped


def count_triplet_violations(triplets, keys, labels, window_days: int = 30) -> dict[str, int]:
    """Exhaustively check every triplet against the selection criteria."""
    label_of = dict(zip(keys, np.asarray(labels).tolist()))
    bad_pos = bad_neg = 0
    for a, p, q in triplets:
        pos_ok = (a != p and a[0] == p[0] and abs((a[1] - p[1]).days) <= window_days
                  and label_of[a] == label_of[p])
        neg_is_pos = (q == a) or (q[0] == a[0] and abs((a[1] - q[1]).days) <= window_days
                                  and label_of[q] == label_of[a])
        bad_pos += not pos_ok
        bad_neg += neg_is_pos
    return {"positive_violations": bad_pos, "negative_violations": bad_neg}


def triplet_loss(anchor, positive, negative, margin: float = 1.0) -> float:
    """``max(0, |a-p|_1 - |a-n|_1 + margin)``."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    q = np.asarray(negative, dtype=np.float64)
    if not (a.shape == p.shape == q.shape):
        raise ValueError(f"dimension mismatch: {a.shape}, {p.shape}, {q.shape}")
    return max(0.0, float(np.abs(a - p).sum() - np.abs(a - q).sum() + margin))


def corpus_loss(triplets: Sequence[Triplet], corpus: EmbeddingCorpus, margin: float = 1.0) -> float:
    if not triplets:
        raise ValueError("no triplets to evaluate")
    where = corpus.lookup()
    try:
        idx = np.array([[where[a], where[p], where[q]] for a, p, q in triplets])
    except KeyError as exc:
        raise KeyError(f"no embedding for day {exc.args[0]}") from None
    X = corpus.values
    d_ap = np.abs(X[idx[:, 0]] - X[idx[:, 1]]).sum(axis=1)
    d_an = np.abs(X[idx[:, 0]] - X[idx[:, 2]]).sum(axis=1)
    losses = np.maximum(0.0, d_ap - d_an + margin)
    return float(np.sort(losses).sum() / len(losses))
