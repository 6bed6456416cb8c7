"""Locate the byte region a detector depends on most, then blank it out.

The search keeps an active window, initially the whole file. At every level
the window is split at its midpoint, each half is occluded in turn and the
file rescored. The half whose occlusion drops the malicious score further is
kept. The search stops once the window is no longer than ``beta`` bytes, so a
file of ``|F|`` bytes costs at most ``2 * ceil(log2(|F| / beta))`` detector
queries, exactly that many when both sizes are powers of two.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .detectors import DetectorError
from .pe import Label, RawBinary

DEFAULT_BETA = 2048


class OcclusionError(Exception):
    pass


class RangeOutOfBounds(OcclusionError, ValueError):
    pass


class FileTooSmall(OcclusionError, ValueError):
    pass


class NotMalicious(OcclusionError, ValueError):
    pass


class DetectorFailure(OcclusionError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


class SourceKind(str, enum.Enum):
    RANDOM = "random"
    BENIGN = "benign"
    ZERO = "zero"


@dataclass(frozen=True)
class ByteSource:
    """Where replacement bytes come from.

    Draws are keyed on ``(seed, index)`` so the same request always returns
    the same bytes regardless of what was drawn before.
    """

    kind: SourceKind = SourceKind.RANDOM
    seed: int = 0
    pool: Tuple[bytes, ...] = field(default=(), repr=False)

    @classmethod
    def random(cls, seed: int = 0) -> "ByteSource":
        return cls(SourceKind.RANDOM, seed)

    @classmethod
    def zeros(cls) -> "ByteSource":
        return cls(SourceKind.ZERO)

    @classmethod
    def benign(cls, files: Sequence, seed: int = 0) -> "ByteSource":
        pool = []
        for f in files:
            if isinstance(f, RawBinary):
                if f.label is not Label.BENIGN:
                    raise ValueError(f"{f.origin or f.sha256} is not labeled benign")
                f = f.data
            if len(f):
                pool.append(bytes(f))
        if not pool:
            raise ValueError("benign byte source needs at least one non-empty file")
        return cls(SourceKind.BENIGN, seed, tuple(pool))

    def contiguous(self, length: int) -> bool:
        """True unless a benign draw of ``length`` must stitch several files."""
        return self.kind is not SourceKind.BENIGN or any(len(p) >= length for p in self.pool)

    def draw(self, length: int, index: int = 0) -> bytes:
        if self.kind is SourceKind.ZERO:
            return bytes(length)
        rng = np.random.default_rng([self.seed, index, length])
        if self.kind is SourceKind.RANDOM:
            return rng.bytes(length)
        fits = [p for p in self.pool if len(p) >= length]
        if fits:
            src = fits[int(rng.integers(len(fits)))]
            start = int(rng.integers(len(src) - length + 1))
            return src[start:start + length]
        out = bytearray()
        while len(out) < length:
            src = self.pool[int(rng.integers(len(self.pool)))]
            out.extend(src[: length - len(out)])
        return bytes(out)


class TieBreak(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True)
class OcclusionConfig:
    beta: int = DEFAULT_BETA
    tie_break: TieBreak = TieBreak.LEFT
    source: ByteSource = field(default_factory=ByteSource.random)

    def __post_init__(self):
        if self.beta < 1:
            raise ValueError("beta must be >= 1")


@dataclass(frozen=True)
class Level:
    start: int
    mid: int
    end: int
    left_score: float
    right_score: float
    choice: str  # "left" or "right"


@dataclass
class OcclusionOutcome:
    start: int
    end: int
    baseline_score: Optional[float]
    final_left_score: Optional[float]
    final_right_score: Optional[float]
    calls: int
    trace: List[Level]
    source_fallback: bool = False
    occluded_score: Optional[float] = None
    evaded: Optional[bool] = None

    @property
    def length(self) -> int:
        return self.end - self.start


def _bytes_of(binary) -> bytes:
    return binary.data if isinstance(binary, RawBinary) else bytes(binary)


def occlude_region(data, start: int, end: int, source: ByteSource, index: int = 0) -> bytes:
    data = _bytes_of(data)
    if not 0 <= start < end <= len(data):
        raise RangeOutOfBounds(f"[{start}, {end}) is not a non-empty range inside {len(data)} bytes")
    return data[:start] + source.draw(end - start, index) + data[end:]


def occlusion_search(binary, detector, cfg: OcclusionConfig = OcclusionConfig(),
                     baseline_score: Optional[float] = None) -> OcclusionOutcome:
    """Binary search for the window whose occlusion hurts ``detector`` most.

    The detector sees a read-only view of a scratch buffer that is patched and
    restored in place; it must not keep a reference past the call.
    """
    data = _bytes_of(binary)
    n = len(data)
    if n <= cfg.beta:
        raise FileTooSmall(f"file has {n} bytes; the search needs more than beta={cfg.beta}")
    buf = bytearray(data)
    view = memoryview(buf).toreadonly()
    lo, hi = 0, n
    trace: List[Level] = []
    calls = 0
    draw = 0
    left_score = right_score = None

    def scored(a, b):
        nonlocal calls, draw
        saved = buf[a:b]
        buf[a:b] = cfg.source.draw(b - a, draw)
        draw += 1
        try:
            calls += 1
            return detector.scan(view).score
        except DetectorError as exc:
            raise DetectorFailure(f"detector failed at window [{a}, {b}): {exc}", trace) from exc
        finally:
            buf[a:b] = saved

    try:
        while hi - lo > cfg.beta:
            mid = lo + (hi - lo + 1) // 2  # left half takes the odd byte
            left_score = scored(lo, mid)
            right_score = scored(mid, hi)
            if left_score < right_score:
                go_left = True
            elif right_score < left_score:
                go_left = False
            else:
                go_left = cfg.tie_break is TieBreak.LEFT
            trace.append(Level(lo, mid, hi, left_score, right_score, "left" if go_left else "right"))
            lo, hi = (lo, mid) if go_left else (mid, hi)
    finally:
        view.release()
    return OcclusionOutcome(
        start=lo,
        end=hi,
        baseline_score=baseline_score,
        final_left_score=left_score,
        final_right_score=right_score,
        calls=calls,
        trace=trace,
        source_fallback=not cfg.source.contiguous(hi - lo),
    )


def targeted_occlusion_attack(binary, detector, cfg: OcclusionConfig = OcclusionConfig()):
    """Search, then occlude the winning window. Returns ``(bytes, outcome)``."""
    data = _bytes_of(binary)
    base = detector.scan(data)
    if base.decision is not Label.MALICIOUS:
        raise NotMalicious("targeted occlusion needs a file the detector flags")
    outcome = occlusion_search(data, detector, cfg, baseline_score=base.score)
    occluded = occlude_region(data, outcome.start, outcome.end, cfg.source, index=len(outcome.trace) * 2)
    after = detector.scan(occluded)
    outcome.occluded_score = after.score
    outcome.evaded = after.decision is Label.BENIGN
    return occluded, outcome


def undirected_occlusion(binary, beta: int, rng) -> bytes:
    """Overwrite a uniformly placed ``beta``-byte window with random bytes."""
    return undirected_occlusion_window(binary, beta, rng)[0]


def undirected_occlusion_window(binary, beta: int, rng) -> Tuple[bytes, int, int]:
    """Like :func:`undirected_occlusion`, also returning the window bounds."""
    data = _bytes_of(binary)
    if len(data) < beta:
        raise FileTooSmall(f"file has {len(data)} bytes, fewer than beta={beta}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    start = int(rng.integers(len(data) - beta + 1))
    return data[:start] + rng.bytes(beta) + data[start + beta:], start, start + beta
