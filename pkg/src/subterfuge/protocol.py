"""Evaluation runs: baseline scans, techniques, and the numbers they produce.

Every scan made during a run becomes one :class:`Record`. Records are the
only state a run keeps; confusion counts, evasion curves and the rendered
tables are all recomputed from them, so a report re-emitted from a saved
ledger is byte-identical to the original.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import os
import shlex
import shutil
import subprocess
import tempfile
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import Corpus
from .detectors import Detector, DetectorError
from .mutations import MAX_CHAIN_STEPS, MutationError, apply_random_chain
from .occlusion import (DEFAULT_BETA, ByteSource, OcclusionConfig, OcclusionError,
                        occlude_region, occlusion_search, undirected_occlusion_window)
from .pe import Label, PeError, RawBinary

REPORT_FORMAT_VERSION = 1


class ProtocolError(Exception):
    pass


class EmptyCorpus(ProtocolError, ValueError):
    pass


class ZeroClass(ProtocolError, ValueError):
    pass


class WrongLabel(ProtocolError, ValueError):
    pass


class BadTemplate(ProtocolError, ValueError):
    pass


class PackerMissing(ProtocolError):
    pass


class CommandFailed(ProtocolError):
    pass


class PackerFailed(CommandFailed):
    pass


class MutatorFailed(CommandFailed):
    pass


# ------------------------------------------------------------- techniques


class TechniqueKind(str, enum.Enum):
    BASELINE = "baseline"
    BENIGN_CHAIN = "benign_mod"
    OCCLUSION = "occlusion"
    PACKING = "packing"
    MUTATOR = "mutator"


class OcclusionMode(str, enum.Enum):
    NONE = "none"
    UNDIRECTED = "undirected"
    TARGETED_RANDOM = "targeted_random"
    TARGETED_ADVERSARIAL = "targeted_adversarial"


OCCLUSION_MODES = tuple(OcclusionMode)


def check_template(template) -> Tuple[str, ...]:
    argv = tuple(shlex.split(template)) if isinstance(template, str) else tuple(template)
    if not argv:
        raise BadTemplate("command template is empty")
    joined = " ".join(argv)
    for slot in ("{in}", "{out}"):
        if slot not in joined:
            raise BadTemplate(f"command template lacks the {slot} placeholder: {joined}")
    return argv


@dataclass(frozen=True)
class BenignChain:
    max_steps: int = MAX_CHAIN_STEPS
    kind = TechniqueKind.BENIGN_CHAIN


@dataclass(frozen=True)
class TargetedOcclusion:
    search_detector: str
    cfg: OcclusionConfig = OcclusionConfig()
    kind = TechniqueKind.OCCLUSION


@dataclass(frozen=True)
class UndirectedOcclusion:
    beta: int = DEFAULT_BETA
    kind = TechniqueKind.OCCLUSION


@dataclass(frozen=True)
class ExternalCommand:
    """An argv template run once per file, e.g. ``("upx", "-o", "{out}", "{in}")``."""

    template: Tuple[str, ...]
    timeout: float = 120.0

    def __post_init__(self):
        object.__setattr__(self, "template", check_template(self.template))
        if self.timeout <= 0:
            raise ValueError("command timeout must be positive")

    def argv(self, in_path, out_path) -> List[str]:
        return [a.replace("{in}", str(in_path)).replace("{out}", str(out_path))
                for a in self.template]

    def check_available(self) -> None:
        exe = self.template[0]
        if shutil.which(exe) is None and not os.access(exe, os.X_OK):
            raise PackerMissing(f"command not found: {exe}")

    def run(self, data: bytes, failure=CommandFailed) -> bytes:
        with tempfile.TemporaryDirectory(prefix="subterfuge-cmd-") as tmp:
            src, dst = Path(tmp, "in.bin"), Path(tmp, "out.bin")
            src.write_bytes(data)
            try:
                proc = subprocess.run(self.argv(src, dst), stdin=subprocess.DEVNULL,
                                      stdout=subprocess.DEVNULL, stderr=subprocess.PIPE,
                                      timeout=self.timeout)
            except FileNotFoundError as exc:
                raise PackerMissing(str(exc)) from None
            except subprocess.TimeoutExpired:
                raise failure(f"timed out after {self.timeout}s") from None
            if proc.returncode != 0:
                tail = proc.stderr.decode("utf-8", "replace").strip().splitlines()[-1:] or [""]
                raise failure(f"exit status {proc.returncode}: {tail[0]}")
            if not dst.is_file():
                raise failure("command succeeded but wrote no output file")
            return dst.read_bytes()


@dataclass(frozen=True)
class ExternalPack:
    command: ExternalCommand
    kind = TechniqueKind.PACKING


@dataclass(frozen=True)
class ExternalMutator:
    command: ExternalCommand
    kind = TechniqueKind.MUTATOR


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class Record:
    """One scan of one file by one detector under one technique."""

    technique: str
    detector: str
    sha256: str
    label: str
    mode: str = ""
    step: int = 0
    score: Optional[float] = None
    decision: Optional[str] = None
    seed: Optional[int] = None
    post_sha256: Optional[str] = None
    error: Optional[str] = None
    extra: Dict[str, object] = field(default_factory=dict)

    @property
    def sort_key(self):
        return (self.technique, self.mode, self.detector, self.sha256, self.step)

    @property
    def malicious(self) -> bool:
        return self.decision == Label.MALICIOUS.value

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Record":
        return cls(**json.loads(line))


def derive_seed(master: int, *parts) -> int:
    """A 64-bit seed fixed by ``master`` and ``parts``, independent of work order."""
    text = ":".join(str(p) for p in (master,) + parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _binaries(corpus) -> List[RawBinary]:
    items = corpus.binaries() if isinstance(corpus, Corpus) else list(corpus)
    out = []
    for b in items:
        if not isinstance(b, RawBinary):
            raise TypeError(f"expected RawBinary, got {type(b).__name__}")
        out.append(b)
    return out


def _map(fn: Callable, items: Sequence, workers: int) -> List:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _scan_record(detector: Detector, data: bytes, technique: str, b: RawBinary, **kw) -> Record:
    try:
        r = detector.scan(data)
    except DetectorError as exc:
        return Record(technique, detector.id, b.sha256, b.label.value,
                      error=f"{type(exc).__name__}: {exc}", **kw)
    return Record(technique, detector.id, b.sha256, b.label.value,
                  score=r.score, decision=r.decision.value, **kw)


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    excluded: Tuple[str, ...] = ()

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def n_malicious(self) -> int:
        return self.tp + self.fn

    @property
    def n_benign(self) -> int:
        return self.tn + self.fp

    @classmethod
    def from_records(cls, records: Iterable[Record]) -> "ConfusionCounts":
        c = {"tp": 0, "fp": 0, "tn": 0, "fn": 0}
        excluded = []
        for r in records:
            if r.error is not None:
                excluded.append(r.sha256)
                continue
            truth = r.label == Label.MALICIOUS.value
            key = ("t" if r.malicious == truth else "f") + ("p" if r.malicious else "n")
            c[key] += 1
        return cls(**c, excluded=tuple(sorted(excluded)))


@dataclass(frozen=True)
class Metrics:
    tp_pct: Optional[float]
    tn_pct: Optional[float]
    fn_pct: Optional[float]
    fp_pct: Optional[float]
    accuracy_pct: float
    n_malicious: int
    n_benign: int


def compute_metrics(counts: ConfusionCounts, n_malicious: Optional[int] = None,
                    n_benign: Optional[int] = None, allow_empty_class: bool = False) -> Metrics:
    """Percentages per Table-1 cell; class sizes default to those in ``counts``.

    A class with no files raises :class:`ZeroClass` unless ``allow_empty_class``,
    in which case its two rates are ``None``.
    """
    n_mal = counts.n_malicious if n_malicious is None else n_malicious
    n_ben = counts.n_benign if n_benign is None else n_benign
    if counts.tp + counts.fn > n_mal or counts.tn + counts.fp > n_ben:
        raise ValueError("counts exceed the stated class sizes")
    if (n_mal == 0 or n_ben == 0) and not (allow_empty_class and n_mal + n_ben):
        raise ZeroClass(f"need files of both classes, got {n_mal} malicious / {n_ben} benign")
    tp = fn = tn = fp = None
    if n_mal:
        tp, fn = 100.0 * counts.tp / n_mal, 100.0 * counts.fn / n_mal
    if n_ben:
        tn, fp = 100.0 * counts.tn / n_ben, 100.0 * counts.fp / n_ben
    acc = 100.0 * (counts.tp + counts.tn) / (n_mal + n_ben)
    return Metrics(tp, tn, fn, fp, acc, n_mal, n_ben)


def compute_lift(pre_benign_acc_pct: float, post_detect_pct: float) -> float:
    """Detection gained on transformed benign files, net of baseline false positives."""
    for name, v in (("pre_benign_acc_pct", pre_benign_acc_pct), ("post_detect_pct", post_detect_pct)):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"{name} must lie in [0, 100], got {v}")
    # rounded so table-precision inputs give table-precision outputs (15.3 - 14.9 = 0.4)
    return round(post_detect_pct - (100.0 - pre_benign_acc_pct), 10)


def _pct(num: int, den: int) -> Optional[float]:
    return 100.0 * num / den if den else None


# --------------------------------------------------------------- baseline


def baseline_records(binaries: Sequence[RawBinary], detectors: Sequence[Detector],
                     workers: int = 1) -> List[Record]:
    def one(b):
        return [_scan_record(d, b.data, TechniqueKind.BASELINE.value, b) for d in detectors]

    return [r for rs in _map(one, binaries, workers) for r in rs]


def baseline_eval(corpus, detector: Detector, workers: int = 1) -> ConfusionCounts:
    """Scan every file once. Files whose scan fails are listed in ``excluded``."""
    binaries = _binaries(corpus)
    if not binaries:
        raise EmptyCorpus("baseline needs at least one file")
    return ConfusionCounts.from_records(baseline_records(binaries, [detector], workers))


# ------------------------------------------------------ benign modification


@dataclass(frozen=True)
class EvasionCurve:
    detector: str
    evaded_by: Tuple[int, ...]  # evaded_by[k]: files benign after at most k modifications
    already_fn: int
    survived: int
    errors: int = 0

    def __post_init__(self):
        if any(b < a for a, b in zip(self.evaded_by, self.evaded_by[1:])):
            raise ValueError("evasion curve must be non-decreasing")

    @property
    def tested(self) -> int:
        return self.already_fn + self.evaded + self.survived

    @property
    def evaded(self) -> int:
        return self.evaded_by[-1]

    @property
    def evasion_rate_pct(self) -> Optional[float]:
        """Evaded share of the files the detector caught before any change."""
        return _pct(self.evaded, self.evaded + self.survived)


def chain_records(b: RawBinary, detector: Detector, max_steps: int, seed: int) -> List[Record]:
    tech = TechniqueKind.BENIGN_CHAIN.value
    try:
        res = apply_random_chain(b, detector, max_steps=max_steps, rng=seed)
    except (MutationError, PeError, DetectorError) as exc:
        return [Record(tech, detector.id, b.sha256, b.label.value, seed=seed,
                       error=f"{type(exc).__name__}: {exc}")]
    thr = detector.threshold
    out = []
    for k, score in enumerate(res.scores):
        rec = res.records[k - 1] if k else None
        out.append(Record(
            tech, detector.id, b.sha256, b.label.value, step=k, score=score,
            decision=(Label.MALICIOUS if score >= thr else Label.BENIGN).value,
            seed=rec.rng_seed if rec else seed,
            post_sha256=rec.post_sha256 if rec else b.sha256,
            extra={"action": rec.action.variant.value, **rec.action.params} if rec else {},
        ))
    return out


def run_benign_mod_experiment(corpus, detectors: Sequence[Detector], max_steps: int = MAX_CHAIN_STEPS,
                              seed: int = 0, workers: int = 1) -> Tuple[Dict[str, EvasionCurve], List[Record]]:
    """Random modification chains on malicious files, one per file and detector.

    A file's chain seed depends only on ``seed`` and its hash, so every
    detector faces the same action sequence until it stops the chain.
    """
    binaries = _binaries(corpus)
    bad = [b.sha256[:12] for b in binaries if b.label is not Label.MALICIOUS]
    if bad:
        raise WrongLabel(f"benign-modification runs take malicious files only; got {', '.join(bad[:5])}")

    def one(b):
        s = derive_seed(seed, TechniqueKind.BENIGN_CHAIN.value, b.sha256)
        return [r for d in detectors for r in chain_records(b, d, max_steps, s)]

    records = [r for rs in _map(one, binaries, workers) for r in rs]
    return evasion_curves(records, [d.id for d in detectors], max_steps), records


def evasion_curves(records: Iterable[Record], detector_ids: Sequence[str],
                   max_steps: int) -> Dict[str, EvasionCurve]:
    per_file: Dict[Tuple[str, str], List[Record]] = defaultdict(list)
    for r in records:
        if r.technique == TechniqueKind.BENIGN_CHAIN.value:
            per_file[(r.detector, r.sha256)].append(r)
    curves = {}
    for det in detector_ids:
        hist = np.zeros(max_steps + 1, dtype=np.int64)
        already = survived = errors = 0
        for (d, _), rs in sorted(per_file.items()):
            if d != det:
                continue
            rs.sort(key=lambda r: r.step)
            if rs[0].error is not None:
                errors += 1  # excluded from every denominator
            elif not rs[0].malicious:
                already += 1
            elif not rs[-1].malicious:
                hist[rs[-1].step] += 1
            else:
                survived += 1
        curves[det] = EvasionCurve(det, tuple(int(x) for x in np.cumsum(hist)), already,
                                   survived, errors)
    return curves


# ---------------------------------------------------------------- occlusion


def occlusion_records(b: RawBinary, search_detector: Detector, detectors: Sequence[Detector],
                      cfg: OcclusionConfig, seed: int,
                      benign_pool: Optional[ByteSource] = None,
                      modes: Sequence[OcclusionMode] = OCCLUSION_MODES) -> List[Record]:
    tech = TechniqueKind.OCCLUSION.value
    out: List[Record] = []
    for mode in modes:
        s = derive_seed(seed, tech, mode.value, b.sha256)
        extra: Dict[str, object] = {}
        try:
            if mode is OcclusionMode.NONE:
                data = b.data
            elif mode is OcclusionMode.UNDIRECTED:
                data, lo, hi = undirected_occlusion_window(b.data, cfg.beta, s)
                extra = {"start": lo, "end": hi, "calls": 0}
            else:
                if mode is OcclusionMode.TARGETED_RANDOM:
                    source = ByteSource.random(s)
                elif benign_pool is None:
                    continue
                else:
                    source = ByteSource(benign_pool.kind, s, benign_pool.pool)
                mcfg = OcclusionConfig(cfg.beta, cfg.tie_break, source)
                outcome = occlusion_search(b.data, search_detector, mcfg)
                data = occlude_region(b.data, outcome.start, outcome.end, source,
                                      index=2 * len(outcome.trace))
                extra = {"start": outcome.start, "end": outcome.end, "calls": outcome.calls,
                         "search_detector": search_detector.id,
                         "source_fallback": outcome.source_fallback}
        except (OcclusionError, DetectorError) as exc:
            err = f"{type(exc).__name__}: {exc}"
            out.extend(Record(tech, d.id, b.sha256, b.label.value, mode=mode.value, seed=s,
                              error=err) for d in detectors)
            continue
        post = _sha(data)
        for d in detectors:
            out.append(_scan_record(d, data, tech, b, mode=mode.value, seed=s,
                                    post_sha256=post, extra=dict(extra)))
    return out


def run_occlusion_experiment(corpus, search_detector: Detector, detectors: Sequence[Detector],
                             cfg: OcclusionConfig = OcclusionConfig(), seed: int = 0,
                             benign_pool: Optional[ByteSource] = None, workers: int = 1,
                             per_detector_search: bool = False):
    """Search on ``search_detector`` and replay the occluded file on every detector.

    With ``per_detector_search`` each detector is instead attacked with its own
    search. The adversarial mode runs only when ``benign_pool`` is given.
    """
    binaries = _binaries(corpus)
    bad = [b.sha256[:12] for b in binaries if b.label is not Label.MALICIOUS]
    if bad:
        raise WrongLabel(f"occlusion runs take malicious files only; got {', '.join(bad[:5])}")
    if benign_pool is not None and benign_pool.kind.value != "benign":
        raise ValueError("benign_pool must be a benign ByteSource")

    def one(b):
        if not per_detector_search:
            return occlusion_records(b, search_detector, detectors, cfg, seed, benign_pool)
        return [r for d in detectors
                for r in occlusion_records(b, d, [d], cfg, seed, benign_pool)]

    records = [r for rs in _map(one, binaries, workers) for r in rs]
    return occlusion_table(records, [d.id for d in detectors]), records


@dataclass(frozen=True)
class ModeResult:
    tested: int
    detected: int
    detect_pct: Optional[float]
    baseline_detected: int
    retained: int
    retained_pct: Optional[float]  # detection among files caught with no occlusion
    errors: int


def occlusion_table(records: Iterable[Record], detector_ids: Sequence[str]) -> Dict[str, Dict[str, ModeResult]]:
    by = defaultdict(dict)
    for r in records:
        if r.technique == TechniqueKind.OCCLUSION.value:
            by[(r.detector, r.mode)][r.sha256] = r
    table: Dict[str, Dict[str, ModeResult]] = {}
    for det in detector_ids:
        base = by.get((det, OcclusionMode.NONE.value), {})
        caught = {sha for sha, r in base.items() if r.error is None and r.malicious}
        row = {}
        for mode in OCCLUSION_MODES:
            rs = by.get((det, mode.value))
            if rs is None:
                continue
            ok = [r for r in rs.values() if r.error is None]
            detected = sum(r.malicious for r in ok)
            pool = [r for r in ok if r.sha256 in caught]
            retained = sum(r.malicious for r in pool)
            row[mode.value] = ModeResult(len(ok), detected, _pct(detected, len(ok)), len(pool),
                                         retained, _pct(retained, len(pool)), len(rs) - len(ok))
        table[det] = row
    return table


# ------------------------------------------------------------------ packing


@dataclass(frozen=True)
class PackingRow:
    detector: str
    benign: Optional[float]
    packed_benign: Optional[float]
    malware: Optional[float]
    packed_malware: Optional[float]

    @property
    def columns(self) -> Tuple[Optional[float], ...]:
        return (self.benign, self.packed_benign, self.malware, self.packed_malware)


PACKING_HEADER = ("Classifier", "Benign", "Packed Benign", "Malware", "Packed Malware")


def _transform_records(technique: TechniqueKind, binaries: Sequence[RawBinary],
                       detectors: Sequence[Detector], command: ExternalCommand,
                       failure, workers: int) -> List[Record]:
    command.check_available()
    tech = technique.value

    def one(b):
        try:
            out = command.run(b.data, failure)
        except CommandFailed as exc:
            return [Record(tech, "*", b.sha256, b.label.value, mode="transform",
                           error=f"{type(exc).__name__}: {exc}")]
        post = _sha(out)
        recs = []
        for d in detectors:
            recs.append(_scan_record(d, b.data, tech, b, mode="original"))
            recs.append(_scan_record(d, out, tech, b, mode="transformed", post_sha256=post))
        return recs

    return [r for rs in _map(one, binaries, workers) for r in rs]


def run_packing_experiment(corpus, detectors: Sequence[Detector], pack: ExternalCommand,
                           workers: int = 1) -> Tuple[List[PackingRow], int, List[Record]]:
    """Scan originals and packed copies. Returns ``(rows, failed_to_pack, records)``."""
    binaries = _binaries(corpus)
    records = _transform_records(TechniqueKind.PACKING, binaries, detectors, pack,
                                 PackerFailed, workers)
    rows, failed = packing_table(records, [d.id for d in detectors])
    return rows, failed, records


def _valid_pairs(records: Iterable[Record], technique: TechniqueKind):
    """(detector, sha) -> {mode: record}, dropping files with any failed stage."""
    pairs = defaultdict(dict)
    failed_files = set()
    for r in records:
        if r.technique != technique.value:
            continue
        if r.error is not None:
            failed_files.add(r.sha256)
        if r.detector != "*":
            pairs[(r.detector, r.sha256)][r.mode] = r
    return pairs, failed_files


def packing_table(records: Iterable[Record], detector_ids: Sequence[str]) -> Tuple[List[PackingRow], int]:
    pairs, failed = _valid_pairs(records, TechniqueKind.PACKING)
    rows = []
    for det in detector_ids:
        hit = defaultdict(int)
        tot = defaultdict(int)
        for (d, sha), modes in sorted(pairs.items()):
            if d != det or sha in failed:
                continue
            for mode, r in modes.items():
                key = (r.label, mode)
                tot[key] += 1
                hit[key] += r.malicious == (r.label == Label.MALICIOUS.value)
        cell = lambda lab, mode: _pct(hit[(lab.value, mode)], tot[(lab.value, mode)])
        rows.append(PackingRow(det, cell(Label.BENIGN, "original"), cell(Label.BENIGN, "transformed"),
                               cell(Label.MALICIOUS, "original"), cell(Label.MALICIOUS, "transformed")))
    return rows, len(failed)


# ---------------------------------------------------------------- mutators


@dataclass(frozen=True)
class LiftRow:
    detector: str
    files: int
    pre_accuracy_pct: Optional[float]
    post_detect_pct: Optional[float]
    lift: Optional[float]


def run_external_mutator_experiment(corpus, detectors: Sequence[Detector], mutate: ExternalCommand,
                                    workers: int = 1) -> Tuple[List[LiftRow], int, List[Record]]:
    """Benign files in, mutated (now malicious) files out; only successful mutations count."""
    binaries = _binaries(corpus)
    bad = [b.sha256[:12] for b in binaries if b.label is not Label.BENIGN]
    if bad:
        raise WrongLabel(f"mutator runs take benign files only; got {', '.join(bad[:5])}")
    records = _transform_records(TechniqueKind.MUTATOR, binaries, detectors, mutate,
                                 MutatorFailed, workers)
    rows, failed = lift_table(records, [d.id for d in detectors])
    return rows, failed, records


def lift_table(records: Iterable[Record], detector_ids: Sequence[str]) -> Tuple[List[LiftRow], int]:
    pairs, failed = _valid_pairs(records, TechniqueKind.MUTATOR)
    rows = []
    for det in detector_ids:
        n = pre_ok = post_hit = 0
        for (d, sha), modes in sorted(pairs.items()):
            if d != det or sha in failed or set(modes) != {"original", "transformed"}:
                continue
            n += 1
            pre_ok += not modes["original"].malicious
            post_hit += modes["transformed"].malicious
        pre, post = _pct(pre_ok, n), _pct(post_hit, n)
        lift = compute_lift(pre, post) if n else None
        rows.append(LiftRow(det, n, pre, post, lift))
    return rows, len(failed)


# ------------------------------------------------------------------ ledger


class Ledger:
    """Thread-safe record sink, persisted as JSON lines with a leading meta line."""

    def __init__(self, meta: Optional[dict] = None):
        self.meta = dict(meta or {})
        self._records: List[Record] = []
        self._lock = threading.Lock()

    def extend(self, records: Iterable[Record]) -> None:
        with self._lock:
            self._records.extend(records)

    @property
    def records(self) -> List[Record]:
        with self._lock:
            return sorted(self._records, key=lambda r: r.sort_key)

    def dumps(self) -> str:
        lines = [json.dumps({"meta": self.meta}, sort_keys=True, separators=(",", ":"))]
        lines.extend(r.to_json() for r in self.records)
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Ledger":
        with open(path, encoding="utf-8") as fh:
            lines = [ln for ln in fh if ln.strip()]
        if not lines or "meta" not in json.loads(lines[0]):
            raise ProtocolError(f"{path}: not a ledger (missing meta line)")
        led = cls(json.loads(lines[0])["meta"])
        led.extend(Record.from_json(ln) for ln in lines[1:])
        return led


# ------------------------------------------------------------------ report


def _r(x: Optional[float], nd: int = 6) -> Optional[float]:
    return None if x is None else round(x, nd)


def build_report(ledger: Ledger) -> dict:
    """Every number here is derived from ``ledger.records``."""
    meta = ledger.meta
    records = ledger.records
    detectors = list(meta.get("detectors", sorted({r.detector for r in records if r.detector != "*"})))
    techniques = {r.technique for r in records}
    report = {
        "format_version": REPORT_FORMAT_VERSION,
        "run_id": meta.get("run_id"),
        "seed": meta.get("seed"),
        "corpus_digest": meta.get("corpus_digest"),
        "detectors": detectors,
        "config": meta.get("config", {}),
    }
    base = {}
    if TechniqueKind.BASELINE.value in techniques:
        for det in detectors:
            counts = ConfusionCounts.from_records(
                r for r in records if r.technique == "baseline" and r.detector == det)
            entry = {"counts": {k: getattr(counts, k) for k in ("tp", "fp", "tn", "fn")},
                     "excluded": list(counts.excluded)}
            if counts.total:
                m = compute_metrics(counts, allow_empty_class=True)
                entry["metrics"] = {k: _r(v) for k, v in asdict(m).items()}
            base[det] = entry
        report["baseline"] = base
    if TechniqueKind.BENIGN_CHAIN.value in techniques:
        max_steps = int(meta.get("max_steps", MAX_CHAIN_STEPS))
        curves = evasion_curves(records, detectors, max_steps)
        report["benign_mod"] = {
            "max_steps": max_steps,
            "curves": {d: {"evaded_by": list(c.evaded_by), "already_fn": c.already_fn,
                           "evaded": c.evaded, "survived": c.survived, "errors": c.errors,
                           "tested": c.tested, "evasion_rate_pct": _r(c.evasion_rate_pct)}
                       for d, c in curves.items()},
        }
    if TechniqueKind.OCCLUSION.value in techniques:
        table = occlusion_table(records, detectors)
        occl = {d: {m: {k: _r(v) if isinstance(v, float) else v for k, v in asdict(res).items()}
                    for m, res in row.items()} for d, row in table.items()}
        windows = [r.extra for r in records if r.technique == "occlusion" and r.error is None
                   and r.mode.startswith("targeted") and r.detector == detectors[0]]
        report["occlusion"] = {
            "modes": occl,
            "search": {
                "searches": len(windows),
                "mean_calls": _r(float(np.mean([w["calls"] for w in windows]))) if windows else None,
                "mean_window": _r(float(np.mean([w["end"] - w["start"] for w in windows]))) if windows else None,
            },
        }
    if TechniqueKind.PACKING.value in techniques:
        rows, failed = packing_table(records, detectors)
        report["packing"] = {"failed": failed,
                             "rows": {r.detector: dict(zip(PACKING_HEADER[1:], map(_r, r.columns)))
                                      for r in rows}}
    if TechniqueKind.MUTATOR.value in techniques:
        rows, failed = lift_table(records, detectors)
        report["mutator"] = {"failed": failed,
                             "rows": {r.detector: {"files": r.files, "pre_accuracy_pct": _r(r.pre_accuracy_pct),
                                                   "post_detect_pct": _r(r.post_detect_pct),
                                                   "lift": _r(r.lift)} for r in rows}}
    return report


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.1f}"


def _md_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def render_packing_table(rows: Sequence[PackingRow]) -> str:
    return _md_table(PACKING_HEADER, ([r.detector] + [_fmt(c) for c in r.columns] for r in rows))


def render_markdown(report: dict) -> str:
    out = [f"# Evaluation report `{report.get('run_id')}`", "",
           f"- seed: {report.get('seed')}", f"- corpus digest: `{report.get('corpus_digest')}`",
           f"- detectors: {', '.join(report['detectors'])}", ""]
    if "baseline" in report:
        out += ["## Baseline", ""]
        rows = []
        for det, e in report["baseline"].items():
            m = e.get("metrics", {})
            rows.append([det] + [_fmt(m.get(k)) for k in ("tn_pct", "tp_pct", "fn_pct", "fp_pct", "accuracy_pct")])
        out += [_md_table(("Classifier", "TN%", "TP%", "FN%", "FP%", "Accuracy%"), rows), ""]
    if "benign_mod" in report:
        bm = report["benign_mod"]
        out += [f"## Benign modifications (up to {bm['max_steps']} steps)", ""]
        rows = [[d, c["already_fn"], c["evaded"], c["survived"], c["errors"], _fmt(c["evasion_rate_pct"])]
                for d, c in bm["curves"].items()]
        out += [_md_table(("Classifier", "Already FN", "Evaded", "Survived", "Errors", "Evasion %"), rows), ""]
    if "occlusion" in report:
        out += ["## Occlusion detection rate (%)", ""]
        modes = [m.value for m in OCCLUSION_MODES]
        rows = [[d] + [_fmt(row[m]["detect_pct"]) if m in row else "n/a" for m in modes]
                for d, row in report["occlusion"]["modes"].items()]
        out += [_md_table(["Classifier"] + modes, rows), ""]
        out += ["Retained detection among files caught with no occlusion (%):", ""]
        rows = [[d] + [_fmt(row[m]["retained_pct"]) if m in row else "n/a" for m in modes]
                for d, row in report["occlusion"]["modes"].items()]
        out += [_md_table(["Classifier"] + modes, rows), ""]
    if "packing" in report:
        p = report["packing"]
        out += ["## Packing", ""]
        rows = [PackingRow(d, *(c[h] for h in PACKING_HEADER[1:])) for d, c in p["rows"].items()]
        out += [render_packing_table(rows), "", f"Files that failed to pack: {p['failed']}", ""]
    if "mutator" in report:
        m = report["mutator"]
        out += ["## External mutator", ""]
        rows = [[d, r["files"], _fmt(r["pre_accuracy_pct"]), _fmt(r["post_detect_pct"]), _fmt(r["lift"])]
                for d, r in m["rows"].items()]
        out += [_md_table(("Classifier", "Files", "Pre Accuracy", "Post Accuracy", "Lift"), rows), "",
                f"Files the mutator rejected: {m['failed']}", ""]
    return "\n".join(out)


def curves_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("detector", "k", "evaded_by"))
    for det, c in report.get("benign_mod", {}).get("curves", {}).items():
        for k, v in enumerate(c["evaded_by"]):
            w.writerow((det, k, v))
    return buf.getvalue()


RECORD_COLUMNS = ("technique", "mode", "detector", "sha256", "label", "step", "score",
                  "decision", "seed", "post_sha256", "error", "extra")


def records_csv(records: Iterable[Record]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        d = asdict(r)
        d["extra"] = json.dumps(d["extra"], sort_keys=True) if d["extra"] else ""
        w.writerow(["" if d[c] is None else d[c] for c in RECORD_COLUMNS])
    return buf.getvalue()


REPORT_FORMATS = ("json", "md", "csv")


def emit_report(ledger: Ledger, out_dir, formats: Sequence[str] = REPORT_FORMATS) -> List[Path]:
    """Write ``ledger.jsonl`` plus the requested views of it into ``out_dir``."""
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise ValueError(f"unknown report format(s): {', '.join(sorted(unknown))}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(ledger)
    written = {"ledger.jsonl": ledger.dumps()}
    if "json" in formats:
        written["report.json"] = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if "md" in formats:
        written["report.md"] = render_markdown(report)
    if "csv" in formats:
        written["curves.csv"] = curves_csv(report)
        written["records.csv"] = records_csv(ledger.records)
    paths = []
    for name, text in written.items():
        p = out / name
        p.write_text(text, encoding="utf-8")
        paths.append(p)
    return paths
