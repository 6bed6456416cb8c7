"""Hashed byte n-gram presence features with a logistic-regression head.

Each distinct n-gram in a file is hashed with 64-bit FNV-1a and folded
modulo ``num_buckets``. The model is fit with mini-batch SGD on the logistic
loss plus an L2 penalty.

Grams that occur in nearly every file (header bytes, padding, common code)
are almost collinear with the bias and make plain SGD crawl. Training
therefore steps in mean-centered feature coordinates, computed implicitly so
the design matrix stays sparse, and folds the centering back into the bias
at the end. The fitted model still scores as ``bias + sum(weights[present])``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np
import scipy.sparse as sp

MAGIC = b"SUBNG1"
FORMAT_VERSION = 1

DEFAULT_N = 6
DEFAULT_BUCKETS = 2**20

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ModelFormatError(Exception):
    pass


class BadMagic(ModelFormatError):
    pass


class VersionMismatch(ModelFormatError):
    pass


class Corrupt(ModelFormatError):
    pass


class DegenerateCorpus(ValueError):
    pass


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray):
        return data.astype(np.uint8, copy=False)
    return np.frombuffer(data, dtype=np.uint8)


def gram_hashes(data, n: int = DEFAULT_N) -> np.ndarray:
    """FNV-1a 64 of every length-``n`` window, in file order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    arr = _as_array(data)
    count = len(arr) - n + 1
    if count <= 0:
        return np.empty(0, dtype=np.uint64)
    h = np.full(count, FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    for j in range(n):
        h ^= arr[j:j + count].astype(np.uint64)
        h *= prime  # wraps modulo 2**64
    return h


def extract_features(data, n: int = DEFAULT_N, num_buckets: int = DEFAULT_BUCKETS,
                     counts: bool = False):
    """Sorted unique bucket indices of the file's n-grams.

    With ``counts=True`` returns ``(indices, counts)`` instead.
    """
    idx = gram_hashes(data, n) % np.uint64(num_buckets)
    if counts:
        uniq, cnt = np.unique(idx, return_counts=True)
        return uniq.astype(np.int64), cnt
    return np.unique(idx).astype(np.int64)


@dataclass
class NGramModel:
    n: int
    num_buckets: int
    weights: np.ndarray
    bias: float
    seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.num_buckets,):
            raise ValueError(
                f"weights must have shape ({self.num_buckets},), got {self.weights.shape}")

    def __eq__(self, other):
        if not isinstance(other, NGramModel):
            return NotImplemented
        return (self.n == other.n and self.num_buckets == other.num_buckets
                and self.bias == other.bias and self.seed == other.seed
                and np.array_equal(self.weights, other.weights))

    @classmethod
    def zeros(cls, n: int = DEFAULT_N, num_buckets: int = DEFAULT_BUCKETS) -> "NGramModel":
        return cls(n, num_buckets, np.zeros(num_buckets), 0.0)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def predict(model: NGramModel, data) -> float:
    idx = extract_features(data, model.n, model.num_buckets)
    return _sigmoid(model.bias + float(model.weights[idx].sum()))


@dataclass(frozen=True)
class TrainParams:
    n: int = DEFAULT_N
    num_buckets: int = DEFAULT_BUCKETS
    epochs: int = 10
    learning_rate: float = 0.2
    l2: float = 1e-6
    batch_size: int = 32
    seed: int = 0


def feature_matrix(samples: Iterable, n: int, num_buckets: int) -> sp.csr_matrix:
    rows: List[np.ndarray] = [extract_features(s, n, num_buckets) for s in samples]
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    np.cumsum([len(r) for r in rows], out=indptr[1:])
    indices = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
    values = np.ones(len(indices), dtype=np.float64)
    return sp.csr_matrix((values, indices, indptr), shape=(len(rows), num_buckets))


def train(samples: Sequence, labels: Sequence[int], params: TrainParams = TrainParams()) -> NGramModel:
    """Fit on byte strings ``samples`` with labels 1 = malicious, 0 = benign."""
    y = np.asarray(labels, dtype=np.float64)
    if len(samples) != len(y):
        raise ValueError("samples and labels differ in length")
    if len(y) == 0 or y.min() == y.max():
        raise DegenerateCorpus("training needs at least one file of each label")
    X = feature_matrix(samples, params.n, params.num_buckets)
    mu = np.asarray(X.mean(axis=0)).ravel()
    w = np.zeros(params.num_buckets)
    b = 0.0  # intercept in centered coordinates
    rng = np.random.default_rng(params.seed)
    for _ in range(params.epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), params.batch_size):
            batch = order[start:start + params.batch_size]
            Xb = X[batch]
            z = Xb @ w - mu @ w + b
            p = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
            g = (p - y[batch]) / len(batch)
            gsum = float(g.sum())
            w -= params.learning_rate * (Xb.T @ g - mu * gsum + params.l2 * w)
            b -= params.learning_rate * gsum
    return NGramModel(params.n, params.num_buckets, w, float(b - mu @ w), params.seed)


def save_model(model: NGramModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQd", FORMAT_VERSION, model.n, model.num_buckets, model.bias))
        fh.write(model.weights.astype("<f8").tobytes())
        fh.write(struct.pack("<Q", model.seed))


def load_model(path) -> NGramModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not an n-gram model file")
    head = len(MAGIC) + struct.calcsize("<IIQd")
    if len(blob) < head:
        raise Corrupt(f"{path}: truncated header")
    version, n, buckets, bias = struct.unpack_from("<IIQd", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(blob) != head + 8 * buckets + 8:
        raise Corrupt(f"{path}: expected {head + 8 * buckets + 8} bytes, found {len(blob)}")
    weights = np.frombuffer(blob, dtype="<f8", count=buckets, offset=head).astype(np.float64)
    (seed,) = struct.unpack_from("<Q", blob, head + 8 * buckets)
    return NGramModel(n, buckets, weights, bias, seed)
