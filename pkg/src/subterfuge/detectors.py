"""Scoring oracles.

A detector maps file bytes to a confidence in [0, 1] that the file is
malicious, and thresholds it into a decision. Attacks only ever see
:meth:`Detector.scan`; nothing here exposes gradients or features.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass
from typing import Callable

from .pe import Label


class DetectorError(Exception):
    pass


class ScoreOutOfRange(DetectorError):
    pass


@dataclass(frozen=True)
class ScanResult:
    score: float
    decision: Label
    latency: float = 0.0

    @property
    def malicious(self) -> bool:
        return self.decision is Label.MALICIOUS


def decide(score: float, threshold: float) -> Label:
    return Label.MALICIOUS if score >= threshold else Label.BENIGN


class Detector:
    """Base class. Subclasses implement :meth:`score`."""

    kind = "abstract"

    def __init__(self, id: str, threshold: float = 0.5, reentrant: bool = True):
        if not 0.0 <= threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
        self.id = id
        self.threshold = threshold
        self.reentrant = reentrant
        self._lock = None if reentrant else threading.Lock()

    def score(self, data) -> float:
        raise NotImplementedError

    def scan(self, data) -> ScanResult:
        t0 = time.perf_counter()
        if self._lock is None:
            s = self.score(data)
        else:
            with self._lock:
                s = self.score(data)
        s = float(s)
        if not 0.0 <= s <= 1.0:
            raise ScoreOutOfRange(f"detector {self.id!r} returned score {s}")
        return ScanResult(s, decide(s, self.threshold), time.perf_counter() - t0)

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"{type(self).__name__}(id={self.id!r}, threshold={self.threshold})"


class FunctionDetector(Detector):
    """Wrap a plain ``bytes -> score`` callable (toy and oracle detectors)."""

    kind = "function"

    def __init__(self, fn: Callable[[bytes], float], id: str = "function", threshold: float = 0.5):
        super().__init__(id, threshold)
        self.fn = fn

    def score(self, data) -> float:
        return self.fn(data)


class ConstantDetector(Detector):
    kind = "constant"

    def __init__(self, value: float = 1.0, id: str = "constant", threshold: float = 0.5):
        super().__init__(id, threshold)
        self.value = value

    def score(self, data) -> float:
        return self.value


class CountingDetector(Detector):
    """Delegates to another detector and counts queries."""

    def __init__(self, inner: Detector):
        super().__init__(inner.id, inner.threshold, inner.reentrant)
        self.inner = inner
        self.calls = 0

    def score(self, data) -> float:
        self.calls += 1
        return self.inner.score(data)


class NGramDetector(Detector):
    kind = "ngram"

    def __init__(self, model, id: str = "ngram", threshold: float = 0.5):
        super().__init__(id, threshold)
        self.model = model

    def score(self, data) -> float:
        from .ngram import predict

        return predict(self.model, data)

    @classmethod
    def from_path(cls, path, id: str = "ngram", threshold: float = 0.5) -> "NGramDetector":
        from .ngram import load_model

        return cls(load_model(path), id=id, threshold=threshold)
