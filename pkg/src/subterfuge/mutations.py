"""Functionality-preserving PE modifications and the random modification chain.

Every action takes a parsed :class:`~subterfuge.pe.PeFile` (or raw bytes) and
returns new bytes; inputs are never modified. Actions that need randomness
take a ``numpy.random.Generator`` so a chain can be replayed from its
recorded per-step seeds.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .pe import (
    DIR_BOUND_IMPORT,
    DIR_IMPORT,
    DIR_SECURITY,
    SECTION_HEADER_SIZE,
    SCN_CNT_CODE,
    SCN_CNT_INITIALIZED_DATA,
    SCN_MEM_EXECUTE,
    SCN_MEM_READ,
    SCN_MEM_WRITE,
    Label,
    PeError,
    PeFile,
    RawBinary,
    align_up,
    build_import_table,
    parse_debug,
    parse_imports,
    parse_pe,
    rva_to_offset,
    serialize,
)

POOL_VERSION = 1

SECTION_NAME_POOL = (".text", ".rdata", ".data", ".rsrc", ".reloc")
NEW_SECTION_NAME_POOL = (".rsrc", ".reloc", ".tls", ".pdata", ".didat", ".CRT", ".gfids", ".00cfg")

IMPORT_POOL = (
    ("kernel32.dll", "GetTickCount"),
    ("kernel32.dll", "GetCurrentProcessId"),
    ("kernel32.dll", "GetCurrentThreadId"),
    ("kernel32.dll", "Sleep"),
    ("kernel32.dll", "GetSystemTimeAsFileTime"),
    ("kernel32.dll", "QueryPerformanceCounter"),
    ("kernel32.dll", "GetLastError"),
    ("kernel32.dll", "GetVersion"),
    ("kernel32.dll", "IsDebuggerPresent"),
    ("kernel32.dll", "GetCommandLineA"),
    ("user32.dll", "GetForegroundWindow"),
    ("user32.dll", "MessageBeep"),
    ("user32.dll", "GetDesktopWindow"),
    ("advapi32.dll", "GetUserNameA"),
    ("gdi32.dll", "GetStockObject"),
    ("shell32.dll", "SHGetFolderPathA"),
)

APPEND_RANGE = (16, 1024)  # inclusive byte counts drawn for the append actions
NEW_SECTION_RANGE = (64, 4096)
MAX_CHAIN_STEPS = 10

_JMP_REL32 = 0xE9
_STUB_SIZE = 5


class MutationError(Exception):
    pass


class NoSections(MutationError):
    pass


class NoHeaderSlack(MutationError):
    pass


class NoSlack(MutationError):
    pass


class NoImportDirectory(MutationError):
    pass


class NoRoom(MutationError):
    pass


class AllActionsInapplicable(MutationError):
    pass


class Variant(str, enum.Enum):
    RENAME_SECTION = "rename_section"
    ADD_SECTION = "add_section"
    APPEND_TO_SECTION = "append_to_section"
    APPEND_OVERLAY = "append_overlay"
    ADD_IMPORT = "add_import"
    NEW_ENTRY_POINT = "new_entry_point"
    ZERO_CHECKSUM = "zero_checksum"
    STRIP_SIGNATURE = "strip_signature"
    SCRAMBLE_DEBUG = "scramble_debug"


VARIANTS: Tuple[Variant, ...] = tuple(Variant)

Filler = Callable[[np.random.Generator, int], bytes]


def uniform_filler(rng: np.random.Generator, n: int) -> bytes:
    return rng.bytes(n)


def benign_filler(pool: Sequence[bytes]) -> Filler:
    """Filler drawing contiguous runs from known-benign files."""
    pool = [bytes(p) for p in pool if len(p)]
    if not pool:
        raise ValueError("benign filler needs at least one non-empty file")

    def draw(rng: np.random.Generator, n: int) -> bytes:
        if n == 0:
            return b""
        fits = [p for p in pool if len(p) >= n]
        if fits:
            src = fits[int(rng.integers(len(fits)))]
            start = int(rng.integers(len(src) - n + 1))
            return src[start:start + n]
        out = bytearray()
        while len(out) < n:
            src = pool[int(rng.integers(len(pool)))]
            out.extend(src[: n - len(out)])
        return bytes(out)

    return draw


def _as_pe(pe) -> PeFile:
    return pe if isinstance(pe, PeFile) else parse_pe(pe)


def _splice(pe: PeFile, start: int, stop: int, blob: bytes) -> bytearray:
    """Replace ``data[start:stop]`` with ``blob`` and fix file-offset pointers.

    Section raw pointers, the certificate offset and debug payload pointers at
    or past ``stop`` move by the size difference. ``start`` may lie beyond EOF,
    in which case the file is zero-padded first.
    """
    data = pe.data
    if start > len(data):
        data = data + b"\0" * (start - len(data))
        stop = start
    delta = len(blob) - (stop - start)
    out = bytearray(data[:start]) + bytearray(blob) + bytearray(data[stop:])
    if delta == 0:
        return out

    def moved(off):
        return off + delta if off >= stop else off

    for s in pe.sections:
        if s.raw_size and s.raw_pointer >= stop:
            struct.pack_into("<I", out, s.header_offset + 20, s.raw_pointer + delta)
    cert = pe.certificate_range
    if cert is not None and cert[0] >= stop:
        struct.pack_into("<I", out, pe.data_directory_offset + 8 * DIR_SECURITY, cert[0] + delta)
    try:
        entries = parse_debug(pe)
    except PeError:
        entries = []
    for e in entries:
        if e.pointer_to_raw_data and e.pointer_to_raw_data >= stop:
            struct.pack_into("<I", out, moved(e.entry_offset) + 24, e.pointer_to_raw_data + delta)
    return out


def _write_section_header(buf: bytearray, off: int, name: bytes, vsize: int, va: int,
                          rsize: int, rptr: int, chars: int) -> None:
    buf[off:off + 8] = name
    struct.pack_into("<IIIIIIHHI", buf, off + 8, vsize, va, rsize, rptr, 0, 0, 0, 0, chars)


def _pad_name(name: str) -> bytes:
    return name.encode("latin-1").ljust(8, b"\0")[:8]


def _add_section(pe: PeFile, name: bytes, body_at: Callable[[int], bytes], chars: int) -> bytes:
    """Append a section header plus raw data. ``body_at(va)`` builds the body."""
    if pe.header_slack() < SECTION_HEADER_SIZE:
        raise NoHeaderSlack("no room in the header area for another section header")
    va = pe.image_end
    body = body_at(va)
    raw_size = align_up(len(body), pe.file_alignment)
    at = align_up(pe.sections_end, pe.file_alignment)
    out = _splice(pe, at, at, body.ljust(raw_size, b"\0"))
    _write_section_header(out, pe.section_table_end, name, len(body), va, raw_size, at, chars)
    struct.pack_into("<H", out, pe.coff_offset + 2, pe.number_of_sections + 1)
    size_of_image = align_up(va + len(body), pe.section_alignment)
    struct.pack_into("<I", out, pe.size_of_image_field_offset, max(pe.size_of_image, size_of_image))
    return bytes(out)


def _next_va(pe: PeFile, index: int) -> Optional[int]:
    va = pe.sections[index].virtual_address
    later = [s.virtual_address for s in pe.sections if s.virtual_address > va]
    return min(later) if later else None


def _used(section) -> int:
    if section.virtual_size:
        return min(section.virtual_size, section.raw_size)
    return section.raw_size


def _fits_virtually(pe: PeFile, index: int, new_vsize: int) -> bool:
    nxt = _next_va(pe, index)
    s = pe.sections[index]
    return nxt is None or s.virtual_address + align_up(new_vsize, pe.section_alignment) <= nxt


# ---------------------------------------------------------------- actions


def rename_section(pe, index: int, rng: np.random.Generator) -> bytes:
    pe = _as_pe(pe)
    if not pe.sections:
        raise NoSections("file has no sections")
    current = pe.sections[index].name
    choices = [n for n in (_pad_name(x) for x in SECTION_NAME_POOL) if n != current]
    name = choices[int(rng.integers(len(choices)))]
    return serialize(pe.with_section(index, name=name))


def add_section(pe, rng: np.random.Generator, filler: Filler = uniform_filler) -> bytes:
    pe = _as_pe(pe)
    lo, hi = NEW_SECTION_RANGE
    length = int(rng.integers(lo, hi + 1))
    name = _pad_name(NEW_SECTION_NAME_POOL[int(rng.integers(len(NEW_SECTION_NAME_POOL)))])
    body = filler(rng, length)
    return _add_section(pe, name, lambda va: body, SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ)


def append_to_section(pe, index: int, count: int, rng: np.random.Generator,
                      filler: Filler = uniform_filler, allow_growth: bool = True) -> bytes:
    pe = _as_pe(pe)
    if not pe.sections:
        raise NoSections("file has no sections")
    if count == 0:
        return pe.data
    s = pe.sections[index]
    used = _used(s)
    payload = filler(rng, count)
    if used + count <= s.raw_size:
        out = bytearray(pe.data)
        start = s.raw_pointer + used
        out[start:start + count] = payload
        if s.virtual_size and _fits_virtually(pe, index, used + count):
            struct.pack_into("<I", out, s.header_offset + 8, max(s.virtual_size, used + count))
        return bytes(out)
    if not allow_growth:
        raise NoSlack(f"section {index} has {s.raw_size - used} slack bytes, need {count}")
    delta = align_up(used + count - s.raw_size, pe.file_alignment)
    out = _splice(pe, s.raw_end, s.raw_end, b"\0" * delta)
    start = s.raw_pointer + used
    out[start:start + count] = payload
    struct.pack_into("<I", out, s.header_offset + 16, s.raw_size + delta)
    new_vsize = used + count
    if new_vsize > s.virtual_extent and _fits_virtually(pe, index, new_vsize):
        struct.pack_into("<I", out, s.header_offset + 8, new_vsize)
        end = align_up(s.virtual_address + new_vsize, pe.section_alignment)
        if end > pe.size_of_image:
            struct.pack_into("<I", out, pe.size_of_image_field_offset, end)
    elif not s.virtual_size:
        # a zero virtual size means "use raw size"; keep the old extent
        struct.pack_into("<I", out, s.header_offset + 8, s.raw_size)
    return bytes(out)


def append_overlay(pe, count: int, rng: np.random.Generator, filler: Filler = uniform_filler) -> bytes:
    data = pe.data if isinstance(pe, PeFile) else bytes(pe)
    return data + filler(rng, count)


def _next_import(present, rng: np.random.Generator) -> Optional[Tuple[str, str]]:
    start = int(rng.integers(len(IMPORT_POOL)))
    for k in range(len(IMPORT_POOL)):
        dll, fn = IMPORT_POOL[(start + k) % len(IMPORT_POOL)]
        if (dll.lower(), fn) not in present:
            return dll, fn
    return None


def add_import(pe, rng: np.random.Generator) -> bytes:
    """Add one unused (dll, function) pair by rebuilding the import directory
    in a new section. The old descriptors are copied, so existing IAT slots
    stay where the code expects them."""
    pe = _as_pe(pe)
    rva, _ = pe.directory(DIR_IMPORT)
    if not rva:
        raise NoImportDirectory("file has no import directory")
    descriptors = parse_imports(pe)
    present = {(d.dll.lower(), f) for d in descriptors for f in d.functions}
    pick = _next_import(present, rng)
    if pick is None:
        raise NoRoom("every pooled import is already present")
    if pe.header_slack() < SECTION_HEADER_SIZE:
        raise NoRoom("no room in the header area for an import section")
    off = rva_to_offset(pe, rva)
    existing = [pe.data[off + 20 * i: off + 20 * i + 20] for i in range(len(descriptors))]
    table_size = {}

    def body(va):
        blob, size = build_import_table(va, existing, [(pick[0], [pick[1]])], pe.thunk_size)
        table_size["va"], table_size["size"] = va, size
        return blob

    out = bytearray(_add_section(pe, _pad_name(".idata"), body,
                                 SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE))
    struct.pack_into("<II", out, pe.data_directory_offset + 8 * DIR_IMPORT,
                     table_size["va"], table_size["size"])
    if len(pe.data_directories) > DIR_BOUND_IMPORT and pe.directory(DIR_BOUND_IMPORT)[0]:
        # bound entries describe the old table layout
        struct.pack_into("<II", out, pe.data_directory_offset + 8 * DIR_BOUND_IMPORT, 0, 0)
    return bytes(out)


def _jmp_stub(from_rva: int, target_rva: int) -> bytes:
    rel = (target_rva - (from_rva + _STUB_SIZE)) & 0xFFFFFFFF
    return bytes([_JMP_REL32]) + struct.pack("<I", rel)


def _stub_slots(pe: PeFile) -> List[int]:
    slots = []
    for i, s in enumerate(pe.sections):
        if not s.is_executable or not s.virtual_size:
            continue
        used = _used(s)
        if used + _STUB_SIZE <= s.raw_size and _fits_virtually(pe, i, used + _STUB_SIZE):
            slots.append(i)
    return slots


def new_entry_point(pe, rng: np.random.Generator) -> bytes:
    """Point the entry at a ``jmp rel32`` stub that lands on the old entry."""
    pe = _as_pe(pe)
    old = pe.entry_point_rva
    slots = _stub_slots(pe)
    if slots:
        i = slots[int(rng.integers(len(slots)))]
        s = pe.sections[i]
        used = _used(s)
        stub_rva = s.virtual_address + used
        out = bytearray(pe.data)
        start = s.raw_pointer + used
        out[start:start + _STUB_SIZE] = _jmp_stub(stub_rva, old)
        struct.pack_into("<I", out, s.header_offset + 8, used + _STUB_SIZE)
    else:
        if pe.header_slack() < SECTION_HEADER_SIZE:
            raise NoRoom("no executable slack and no room for a new section")
        stub_rva = pe.image_end
        out = bytearray(_add_section(pe, _pad_name(".text1"), lambda va: _jmp_stub(va, old),
                                     SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ))
    struct.pack_into("<I", out, pe.entry_point_field_offset, stub_rva)
    return bytes(out)


def entry_stub_target(pe) -> Optional[int]:
    """Decode a ``jmp rel32`` at the entry point; None if the entry is not one."""
    pe = _as_pe(pe)
    off = rva_to_offset(pe, pe.entry_point_rva)
    code = pe.data[off:off + _STUB_SIZE]
    if len(code) < _STUB_SIZE or code[0] != _JMP_REL32:
        return None
    (rel,) = struct.unpack("<i", code[1:])
    return (pe.entry_point_rva + _STUB_SIZE + rel) & 0xFFFFFFFF


def zero_checksum(pe) -> bytes:
    pe = _as_pe(pe)
    if pe.checksum == 0:
        return pe.data
    return serialize(replace(pe, checksum=0))


def strip_signature(pe) -> bytes:
    pe = _as_pe(pe)
    cert = pe.certificate_range
    if cert is None:
        return pe.data
    start, stop = cert[0], min(cert[1], len(pe.data))
    out = _splice(pe, start, max(start, stop), b"")
    struct.pack_into("<II", out, pe.data_directory_offset + 8 * DIR_SECURITY, 0, 0)
    return bytes(out)


def scramble_debug(pe, rng: np.random.Generator) -> bytes:
    pe = _as_pe(pe)
    entries = parse_debug(pe)
    if not entries:
        return pe.data
    out = bytearray(pe.data)
    for e in entries:
        struct.pack_into("<I", out, e.entry_offset + 4, 0)
        if e.pointer_to_raw_data and e.size_of_data:
            start = e.pointer_to_raw_data
            stop = min(start + e.size_of_data, len(out))
            if start < stop:
                out[start:stop] = rng.bytes(stop - start)
    return bytes(out)


# ------------------------------------------------------- action dispatch


@dataclass(frozen=True)
class MutationAction:
    variant: Variant
    params: Dict[str, int] = field(default_factory=dict)


def applicable(variant: Variant, pe: PeFile) -> bool:
    """Whether ``variant`` can run on ``pe`` and would change it."""
    try:
        if variant in (Variant.RENAME_SECTION, Variant.APPEND_TO_SECTION):
            return bool(pe.sections)
        if variant is Variant.ADD_SECTION:
            return pe.header_slack() >= SECTION_HEADER_SIZE
        if variant is Variant.APPEND_OVERLAY:
            return True
        if variant is Variant.ADD_IMPORT:
            if not pe.directory(DIR_IMPORT)[0] or pe.header_slack() < SECTION_HEADER_SIZE:
                return False
            present = {(d.dll.lower(), f) for d in parse_imports(pe) for f in d.functions}
            return any((dll.lower(), fn) not in present for dll, fn in IMPORT_POOL)
        if variant is Variant.NEW_ENTRY_POINT:
            rva_to_offset(pe, pe.entry_point_rva)
            return bool(pe.entry_point_rva) and (
                bool(_stub_slots(pe)) or pe.header_slack() >= SECTION_HEADER_SIZE)
        if variant is Variant.ZERO_CHECKSUM:
            return pe.checksum != 0
        if variant is Variant.STRIP_SIGNATURE:
            return pe.certificate_range is not None
        if variant is Variant.SCRAMBLE_DEBUG:
            return any(e.size_of_data for e in parse_debug(pe))
    except PeError:
        return False
    raise ValueError(variant)


def draw_action(variant: Variant, pe: PeFile, rng: np.random.Generator) -> MutationAction:
    """Draw the variant-specific parameters for ``pe``."""
    lo, hi = APPEND_RANGE
    if variant is Variant.RENAME_SECTION:
        return MutationAction(variant, {"index": int(rng.integers(len(pe.sections)))})
    if variant is Variant.APPEND_TO_SECTION:
        candidates = [i for i, s in enumerate(pe.sections) if s.raw_size] or list(range(len(pe.sections)))
        return MutationAction(variant, {
            "index": candidates[int(rng.integers(len(candidates)))],
            "count": int(rng.integers(lo, hi + 1)),
        })
    if variant is Variant.APPEND_OVERLAY:
        return MutationAction(variant, {"count": int(rng.integers(lo, hi + 1))})
    return MutationAction(variant)


def apply_action(pe, action: MutationAction, rng: np.random.Generator,
                 filler: Filler = uniform_filler) -> bytes:
    pe = _as_pe(pe)
    v, p = action.variant, action.params
    if v is Variant.RENAME_SECTION:
        return rename_section(pe, p["index"], rng)
    if v is Variant.ADD_SECTION:
        return add_section(pe, rng, filler)
    if v is Variant.APPEND_TO_SECTION:
        return append_to_section(pe, p["index"], p["count"], rng, filler)
    if v is Variant.APPEND_OVERLAY:
        return append_overlay(pe, p["count"], rng, filler)
    if v is Variant.ADD_IMPORT:
        return add_import(pe, rng)
    if v is Variant.NEW_ENTRY_POINT:
        return new_entry_point(pe, rng)
    if v is Variant.ZERO_CHECKSUM:
        return zero_checksum(pe)
    if v is Variant.STRIP_SIGNATURE:
        return strip_signature(pe)
    if v is Variant.SCRAMBLE_DEBUG:
        return scramble_debug(pe, rng)
    raise ValueError(v)


# ---------------------------------------------------------------- chain


@dataclass(frozen=True)
class MutationRecord:
    action: MutationAction
    rng_seed: int
    pre_sha256: str
    post_sha256: str

    @property
    def noop(self) -> bool:
        return self.pre_sha256 == self.post_sha256


class ChainStatus(str, enum.Enum):
    ALREADY_EVADING = "already_evading"
    EVADED = "evaded"
    SURVIVED = "survived"


@dataclass
class ChainResult:
    status: ChainStatus
    records: List[MutationRecord]
    scores: List[float]  # scores[0] is the unmodified file
    final: bytes
    steps: List[bytes] = field(default_factory=list)

    @property
    def evaded_at(self) -> Optional[int]:
        return len(self.records) if self.status is ChainStatus.EVADED else None


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def mutation_step(data: bytes, seed: int, filler: Filler = uniform_filler) -> Tuple[MutationAction, bytes]:
    """One chain step: pick uniformly among applicable actions and apply it.

    Everything random in the step derives from ``seed``.
    """
    pe = parse_pe(data)
    choices = [v for v in VARIANTS if applicable(v, pe)]
    if not choices:
        raise AllActionsInapplicable("no modification applies to this file")
    rng = np.random.default_rng(seed)
    variant = choices[int(rng.integers(len(choices)))]
    action = draw_action(variant, pe, rng)
    return action, apply_action(pe, action, rng, filler)


def apply_random_chain(binary, detector, max_steps: int = MAX_CHAIN_STEPS, rng=0,
                       filler: Filler = uniform_filler, keep_steps: bool = False) -> ChainResult:
    """Mutate until ``detector`` calls the file benign or ``max_steps`` run out."""
    data = binary.data if isinstance(binary, RawBinary) else bytes(binary)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    first = detector.scan(data)
    scores = [first.score]
    if first.decision is Label.BENIGN:
        return ChainResult(ChainStatus.ALREADY_EVADING, [], scores, data)
    records, steps = [], []
    for _ in range(max_steps):
        seed = int(rng.integers(0, 2**64, dtype=np.uint64))
        action, out = mutation_step(data, seed, filler)
        records.append(MutationRecord(action, seed, _sha(data), _sha(out)))
        if keep_steps:
            steps.append(out)
        data = out
        result = detector.scan(data)
        scores.append(result.score)
        if result.decision is Label.BENIGN:
            return ChainResult(ChainStatus.EVADED, records, scores, data, steps)
    return ChainResult(ChainStatus.SURVIVED, records, scores, data, steps)


def replay_chain(binary, seeds: Sequence[int], filler: Filler = uniform_filler) -> List[bytes]:
    """Re-run a chain from its recorded seeds; returns every intermediate file."""
    data = binary.data if isinstance(binary, RawBinary) else bytes(binary)
    out = []
    for seed in seeds:
        _, data = mutation_step(data, seed, filler)
        out.append(data)
    return out


def write_chain_steps(result: ChainResult, orig_sha256: str, out_dir) -> List[str]:
    """Write ``<orig-sha256>.step<k>.bin`` for each kept step."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, data in enumerate(result.steps, start=1):
        path = os.path.join(out_dir, f"{orig_sha256}.step{k}.bin")
        with open(path, "wb") as fh:
            fh.write(data)
        paths.append(path)
    return paths
