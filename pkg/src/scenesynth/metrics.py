"""Objective metrics over embedding streams, probability vectors, and transcripts.

The neural feature extractors that produce embeddings and classifier
posteriors live outside this package; everything here consumes plain vector
files (CSV or the ``emb-v1`` binary layout) or normalized word sequences,
and every function is pure.
"""

from __future__ import annotations

import re
import string
import struct
from dataclasses import dataclass
from typing import IO, Iterable, Optional, Sequence

import numpy as np

EMB_MAGIC = b"EMB1"


class MetricError(ValueError):
    pass


class DimensionMismatchError(MetricError):
    pass


class TooFewSamplesError(MetricError):
    pass


class NonPSDError(MetricError):
    pass


class EmptyReferenceError(MetricError):
    pass


class ZeroVectorError(MetricError):
    pass


# ---------------------------------------------------------------------------
# embedding statistics

@dataclass(frozen=True)
class EmbeddingStats:
    """Gaussian summary of an embedding set: mean, covariance, sample count."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise DimensionMismatchError(f"cov shape {self.cov.shape} != ({d}, {d})")
        if self.n < 2:
            raise TooFewSamplesError(f"need at least 2 samples, got {self.n}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-9):
            raise MetricError("covariance is not symmetric")


class StatsAccumulator:
    """Single-pass Welford accumulator for mean and unbiased covariance.

    Supports merging two accumulators, so streams can be ingested in
    parallel and combined afterwards.
    """

    def __init__(self, dim: Optional[int] = None):
        self.dim = dim
        self.n = 0
        self._mean: Optional[np.ndarray] = None
        self._m2: Optional[np.ndarray] = None

    def add(self, row) -> None:
        row = np.asarray(row, dtype=np.float64)
        if row.ndim != 1:
            raise DimensionMismatchError(f"expected a vector, got shape {row.shape}")
        if self._mean is None:
            if self.dim is not None and row.shape[0] != self.dim:
                raise DimensionMismatchError(f"expected dim {self.dim}, got {row.shape[0]}")
            self.dim = row.shape[0]
            self._mean = np.zeros(self.dim)
            self._m2 = np.zeros((self.dim, self.dim))
        elif row.shape[0] != self.dim:
            raise DimensionMismatchError(f"expected dim {self.dim}, got {row.shape[0]}")
        self.n += 1
        delta = row - self._mean
        self._mean += delta / self.n
        self._m2 += np.outer(delta, row - self._mean)

    def merge(self, other: "StatsAccumulator") -> None:
        if other.n == 0:
            return
        if self.n == 0:
            self.dim = other.dim
            self.n = other.n
            self._mean = other._mean.copy()
            self._m2 = other._m2.copy()
            return
        if self.dim != other.dim:
            raise DimensionMismatchError(f"cannot merge dims {self.dim} and {other.dim}")
        total = self.n + other.n
        delta = other._mean - self._mean
        self._m2 += other._m2 + np.outer(delta, delta) * (self.n * other.n / total)
        self._mean += delta * (other.n / total)
        self.n = total

    def finalize(self) -> EmbeddingStats:
        if self.n < 2:
            raise TooFewSamplesError(f"need at least 2 samples, got {self.n}")
        cov = self._m2 / (self.n - 1)
        cov = 0.5 * (cov + cov.T)
        return EmbeddingStats(mean=self._mean.copy(), cov=cov, n=self.n)


def accumulate_stats(rows: Iterable) -> EmbeddingStats:
    acc = StatsAccumulator()
    for row in rows:
        acc.add(row)
    return acc.finalize()


def _check_psd(cov: np.ndarray, name: str) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(cov)
    scale = max(np.abs(eigvals).max(), 1.0e-300)
    if eigvals.min() < -1e-6 * scale:
        raise NonPSDError(f"{name} covariance has eigenvalue {eigvals.min():.3e}")
    return np.clip(eigvals, 0.0, None), eigvecs


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2).

    The matrix square roots come from symmetric eigendecompositions with
    negative eigenvalues clamped to zero, which is robust for the moderate
    dimensions this package targets.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatchError(f"dims {a.mean.shape[0]} vs {b.mean.shape[0]}")
    ea, va = _check_psd(a.cov, "first")
    _check_psd(b.cov, "second")
    sqrt_a = (va * np.sqrt(ea)) @ va.T
    inner = sqrt_a @ b.cov @ sqrt_a
    inner = 0.5 * (inner + inner.T)
    ei = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = float(np.sqrt(ei).sum())
    mean_term = float(((a.mean - b.mean) ** 2).sum())
    value = mean_term + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr_sqrt
    return max(0.0, value)


# ---------------------------------------------------------------------------
# paired KL over probability vectors

KL_EPSILON = 1e-10


@dataclass(frozen=True)
class ProbVector:
    """A point on the probability simplex."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = self.probabilities
        if p.ndim != 1:
            raise DimensionMismatchError(f"expected a vector, got shape {p.shape}")
        if (p < 0).any():
            raise MetricError("probabilities must be non-negative")
        if abs(float(p.sum()) - 1.0) > 1e-9:
            raise MetricError(f"probabilities sum to {float(p.sum())}, not 1")

    @classmethod
    def from_values(cls, values) -> "ProbVector":
        return cls(np.asarray(values, dtype=np.float64))


def _smooth(p: np.ndarray) -> np.ndarray:
    q = p + KL_EPSILON
    return q / q.sum()


def kl_divergence(pairs: Sequence[tuple[ProbVector, ProbVector]]) -> float:
    """Mean over pairs of sum p ln(p/q), after epsilon smoothing of both sides."""
    if not pairs:
        raise MetricError("no pairs given")
    total = 0.0
    for p, q in pairs:
        pv, qv = p.probabilities, q.probabilities
        if pv.shape != qv.shape:
            raise DimensionMismatchError(f"pair dims {pv.shape[0]} vs {qv.shape[0]}")
        ps, qs = _smooth(pv), _smooth(qv)
        total += float((ps * np.log(ps / qs)).sum())
    return total / len(pairs)


# ---------------------------------------------------------------------------
# word error rate

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_WS_RE = re.compile(r"\s+")


def normalize_transcript_text(text: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    return _WS_RE.sub(" ", text.lower().translate(_PUNCT_TABLE)).strip()


@dataclass(frozen=True)
class Transcript:
    words: tuple[str, ...]

    def __post_init__(self):
        for w in self.words:
            if not w:
                raise MetricError("transcript contains an empty token")

    @classmethod
    def from_text(cls, text: str) -> "Transcript":
        return cls(tuple(normalize_transcript_text(text).split()))


def word_edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    """Levenshtein distance over word tokens with unit costs."""
    m, n = len(ref), len(hyp)
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            cur[j] = min(sub, prev[j] + 1, cur[j - 1] + 1)
        prev = cur
    return prev[n]


def wer(ref: Transcript, hyp: Transcript) -> float:
    if not ref.words:
        raise EmptyReferenceError("reference transcript is empty")
    return word_edit_distance(ref.words, hyp.words) / len(ref.words)


# ---------------------------------------------------------------------------
# embedding relevance

def relevance_cosine(audio_emb, text_emb) -> float:
    a = np.asarray(audio_emb, dtype=np.float64).flatten()
    b = np.asarray(text_emb, dtype=np.float64).flatten()
    if a.shape != b.shape:
        raise DimensionMismatchError(f"dims {a.shape[0]} vs {b.shape[0]}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine is undefined for a zero vector")
    return float(a @ b) / (na * nb)


# ---------------------------------------------------------------------------
# embedding file IO: CSV (one vector per line) or binary emb-v1

def write_embeddings_csv(stream: IO[str], rows: Iterable) -> int:
    n = 0
    for row in rows:
        vec = np.asarray(row, dtype=np.float64).flatten()
        stream.write(",".join(repr(float(x)) for x in vec) + "\n")
        n += 1
    return n


def read_embeddings_csv(stream: IO[str]) -> Iterable[np.ndarray]:
    for line in stream:
        line = line.strip()
        if not line:
            continue
        yield np.array([float(x) for x in line.split(",")])


def write_embeddings_binary(stream: IO[bytes], rows: Sequence) -> int:
    rows = [np.asarray(r, dtype=np.float32).flatten() for r in rows]
    if not rows:
        raise MetricError("no rows to write")
    dim = rows[0].shape[0]
    stream.write(EMB_MAGIC)
    stream.write(struct.pack("<I", dim))
    for row in rows:
        if row.shape[0] != dim:
            raise DimensionMismatchError(f"row dim {row.shape[0]} != {dim}")
        stream.write(row.tobytes())
    return len(rows)


def read_embeddings_binary(stream: IO[bytes]) -> list[np.ndarray]:
    magic = stream.read(4)
    if magic != EMB_MAGIC:
        raise MetricError(f"bad magic bytes: {magic!r}")
    (dim,) = struct.unpack("<I", stream.read(4))
    payload = stream.read()
    row_bytes = 4 * dim
    if len(payload) % row_bytes:
        raise MetricError("truncated embedding payload")
    out = []
    for off in range(0, len(payload), row_bytes):
        out.append(np.frombuffer(payload[off : off + row_bytes], dtype="<f4").astype(np.float64))
    return out


def load_embeddings(path) -> list[np.ndarray]:
    """Load a vector-per-row embedding file, sniffing binary vs CSV."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == EMB_MAGIC:
        with open(path, "rb") as fh:
            return read_embeddings_binary(fh)
    with open(path, "r", encoding="utf-8") as fh:
        return list(read_embeddings_csv(fh))
