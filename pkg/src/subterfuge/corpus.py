"""Labeled file collections.

A corpus is a list of manifest entries pointing at files in place; nothing
is copied. The digest covers only (sha256, label) pairs so it pins content,
not paths.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import os
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Tuple

import numpy as np

from .pe import SCN_CNT_INITIALIZED_DATA, Label, RawBinary, parse_pe
from .synth import CODE, DATA, RDATA, SectionSpec, build_pe

MANIFEST_COLUMNS = ("path", "label", "sha256", "size", "split")
SYNTHETIC_MARKER_FILE = "SYNTHETIC"

# planted in every synthetic "malicious" file; never present in benign ones
MARKER = bytes.fromhex("deadc0de1337")

# Section bodies are stitched from this fixed pool so both classes share
# their n-grams; uniformly random filler would give every file thousands of
# unique grams and make the classes separable only through collision noise.
_pool_rng = np.random.default_rng(0x5EED)
FILLER_CHUNKS = tuple(_pool_rng.bytes(512) for _ in range(4))
del _pool_rng
CHUNK = len(FILLER_CHUNKS[0])


def _filler(rng: np.random.Generator, size: int) -> bytearray:
    picks = rng.integers(len(FILLER_CHUNKS), size=size // CHUNK + 1)
    return bytearray(b"".join(FILLER_CHUNKS[i] for i in picks)[:size])


class CorpusError(Exception):
    pass


class MissingRoot(CorpusError):
    pass


class LabelConflict(CorpusError):
    def __init__(self, conflicts):
        self.conflicts = list(conflicts)
        super().__init__(f"{len(self.conflicts)} file(s) appear under both labels: "
                         + ", ".join(sha[:12] for sha, _ in self.conflicts[:5]))


class ManifestError(CorpusError):
    pass


class NotEnoughFiles(CorpusError):
    pass


class DegenerateFraction(CorpusError, ValueError):
    pass


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: Label
    sha256: str
    size: int
    split: Split = Split.TRAIN


@dataclass(frozen=True)
class Corpus:
    entries: Tuple[ManifestEntry, ...]
    synthetic: bool = False

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        seen = Counter(e.sha256 for e in self.entries)
        dupes = [sha for sha, k in seen.items() if k > 1]
        if dupes:
            raise CorpusError(f"duplicate sha256 in corpus: {dupes[0]}")

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for sha, label in sorted((e.sha256, e.label.value) for e in self.entries):
            h.update(f"{sha}:{label}\n".encode())
        return h.hexdigest()

    def counts(self) -> dict:
        c = Counter(e.label for e in self.entries)
        return {label.value: c.get(label, 0) for label in (Label.BENIGN, Label.MALICIOUS)}

    def where(self, label: Optional[Label] = None, split: Optional[Split] = None) -> "Corpus":
        keep = [e for e in self.entries
                if (label is None or e.label is label) and (split is None or e.split is split)]
        return Corpus(keep, self.synthetic)

    def load(self, entry: ManifestEntry) -> RawBinary:
        binary = RawBinary.from_path(entry.path, entry.label)
        if binary.sha256 != entry.sha256:
            raise CorpusError(f"{entry.path} changed on disk since it was ingested")
        return binary

    def binaries(self) -> List[RawBinary]:
        return [self.load(e) for e in self.entries]


def _hash_file(path) -> Tuple[str, int]:
    h = hashlib.sha256()
    size = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
            size += len(chunk)
    return h.hexdigest(), size


def _walk(root: Path) -> List[Path]:
    return sorted(p for p in root.rglob("*") if p.is_file())


def _is_synthetic(path: Path) -> bool:
    return (path / SYNTHETIC_MARKER_FILE).exists()


def ingest(root, on_conflict: str = "raise") -> Corpus:
    """Build a corpus from ``root/benign`` + ``root/malicious``, or a manifest CSV."""
    root = Path(root)
    if root.is_file():
        return read_manifest(root)
    dirs = {Label.BENIGN: root / "benign", Label.MALICIOUS: root / "malicious"}
    missing = [str(d) for d in dirs.values() if not d.is_dir()]
    if missing:
        raise MissingRoot(f"missing corpus director{'y' if len(missing) == 1 else 'ies'}: "
                          + ", ".join(missing))
    by_sha = {}
    conflicts = []
    for label, d in dirs.items():
        for path in _walk(d):
            sha, size = _hash_file(path)
            if sha in by_sha:
                if by_sha[sha].label is not label:
                    conflicts.append((sha, (by_sha[sha].path, str(path))))
                continue
            by_sha[sha] = ManifestEntry(str(path), label, sha, size)
    if conflicts:
        if on_conflict == "raise":
            raise LabelConflict(conflicts)
        for sha, _ in conflicts:
            by_sha.pop(sha, None)
    return Corpus(list(by_sha.values()), synthetic=_is_synthetic(root))


def write_manifest(corpus: Corpus, path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC)
        w.writerow(MANIFEST_COLUMNS)
        for e in corpus.entries:
            p = Path(e.path).resolve()
            try:
                p = p.relative_to(base)
            except ValueError:
                pass
            w.writerow([str(p), e.label.value, e.sha256, e.size, e.split.value])


def read_manifest(path) -> Corpus:
    path = Path(path)
    if not path.is_file():
        raise MissingRoot(f"manifest not found: {path}")
    base = path.parent
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields")
            p, label, sha, size, split = row
            full = Path(p) if os.path.isabs(p) else base / p
            if not full.is_file():
                raise ManifestError(f"{path}:{lineno}: file not found: {full}")
            try:
                entries.append(ManifestEntry(str(full), Label.parse(label), sha.lower(),
                                             int(float(size)), Split(split.strip().lower())))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            if entries[-1].label is Label.UNKNOWN:
                raise ManifestError(f"{path}:{lineno}: label must be benign or malicious")
    try:
        return Corpus(entries, synthetic=_is_synthetic(base))
    except CorpusError as exc:
        raise ManifestError(f"{path}: {exc}") from None


def sample(corpus: Corpus, n: int, seed: int, label: Optional[Label] = None) -> Corpus:
    """Uniform sample without replacement."""
    pool = corpus.where(label) if label is not None else corpus
    if n > len(pool):
        raise NotEnoughFiles(f"asked for {n} files, only {len(pool)} available")
    ordered = sorted(pool.entries, key=lambda e: e.sha256)
    pick = np.random.default_rng(seed).choice(len(ordered), size=n, replace=False)
    return Corpus([ordered[i] for i in sorted(pick)], corpus.synthetic)


def split(corpus: Corpus, test_fraction: float, seed: int) -> Tuple[Corpus, Corpus]:
    """Stratified train/test split; entries come back with ``split`` set."""
    if not 0.0 <= test_fraction < 1.0:
        raise DegenerateFraction(f"test fraction must lie in [0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in (Label.BENIGN, Label.MALICIOUS):
        group = sorted((e for e in corpus.entries if e.label is label), key=lambda e: e.sha256)
        k = int(round(test_fraction * len(group)))
        order = rng.permutation(len(group))
        chosen = set(order[:k].tolist())
        for i, e in enumerate(group):
            if i in chosen:
                test.append(replace(e, split=Split.TEST))
            else:
                train.append(replace(e, split=Split.TRAIN))
    return Corpus(train, corpus.synthetic), Corpus(test, corpus.synthetic)


def merge(*parts: Corpus) -> Corpus:
    entries = [e for part in parts for e in part.entries]
    return Corpus(entries, all(p.synthetic for p in parts))


# ------------------------------------------------------------ synthetic data


def synthetic_pe(rng: np.random.Generator, malicious: bool, marker: bytes = MARKER) -> bytes:
    """One structurally valid PE with pooled filler; ``marker`` planted iff malicious."""
    while True:
        nsec = int(rng.integers(1, 4))
        sizes = [int(rng.integers(512, 4097)) for _ in range(nsec)]
        prologue = b"\x55\x8b\xec\x31\xc0\x5d\xc3"
        bodies = [_filler(rng, s) for s in sizes]
        bodies[0][:len(prologue)] = prologue
        if malicious:
            # chunk-aligned so the grams around the marker recur across files;
            # offset 0 of the first section holds the prologue
            slots = [(t, k * CHUNK) for t in range(nsec)
                     for k in range(1 if t == 0 else 0, (sizes[t] - len(marker)) // CHUNK + 1)]
            target, at = slots[int(rng.integers(len(slots)))] if slots else (0, 16)
            bodies[target][at:at + len(marker)] = marker
        names_chars = [(".text", CODE), (".rdata", RDATA), (".data", DATA)]
        specs = []
        for i, body in enumerate(bodies):
            name, chars = names_chars[i]
            if nsec == 1:
                chars |= SCN_CNT_INITIALIZED_DATA
            specs.append(SectionSpec(name, bytes(body), chars))
        import_section = 1 if nsec > 1 else 0
        data = build_pe(
            specs,
            entry=(0, 0),
            imports={"kernel32.dll": ["ExitProcess", "GetModuleHandleA"],
                     "msvcrt.dll": ["printf"]},
            import_section=import_section,
            debug=bool(rng.random() < 0.5),
            debug_section=import_section,
            certificate=bytes(_filler(rng, int(rng.integers(32, 256)))) if rng.random() < 0.25 else None,
            pe32plus=bool(rng.random() < 0.5),
            header_slack=512,
        ).data
        has = marker in data
        if has == malicious:
            return data


def generate_synthetic_corpus(n_per_class: int, seed: int, out_dir) -> Corpus:
    """Write ``n_per_class`` benign and malicious PEs plus ``manifest.csv``."""
    out = Path(out_dir)
    entries = []
    seen = set()
    for label in (Label.BENIGN, Label.MALICIOUS):
        d = out / label.value
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, label is Label.MALICIOUS, i])
            data = synthetic_pe(rng, label is Label.MALICIOUS)
            while hashlib.sha256(data).hexdigest() in seen:  # pooled filler can repeat a small file
                data = synthetic_pe(rng, label is Label.MALICIOUS)
            seen.add(hashlib.sha256(data).hexdigest())
            parse_pe(data, strict=True)
            path = d / f"{i:05d}.bin"
            path.write_bytes(data)
            entries.append(ManifestEntry(str(path), label, hashlib.sha256(data).hexdigest(),
                                         len(data)))
    (out / SYNTHETIC_MARKER_FILE).write_text("generated by subterfuge; contains no real samples\n")
    corpus = Corpus(entries, synthetic=True)
    write_manifest(corpus, out / "manifest.csv")
    return corpus


def label_vector(entries: Iterable[ManifestEntry]) -> np.ndarray:
    return np.array([1 if e.label is Label.MALICIOUS else 0 for e in entries], dtype=np.int8)
