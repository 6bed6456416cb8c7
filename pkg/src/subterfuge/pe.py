"""Minimal Portable Executable model.

Only the fields the mutation engine touches are modeled. Everything else in
the header area is left where it is, so ``serialize(parse_pe(b)) == b`` for any
input ``parse_pe`` accepts.

See https://learn.microsoft.com/en-us/windows/win32/debug/pe-format
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

PE32_MAGIC = 0x10B
PE32PLUS_MAGIC = 0x20B

SECTION_HEADER_SIZE = 40
COFF_HEADER_SIZE = 20

DIR_EXPORT = 0
DIR_IMPORT = 1
DIR_RESOURCE = 2
DIR_EXCEPTION = 3
DIR_SECURITY = 4  # holds a file offset, not an RVA
DIR_BASERELOC = 5
DIR_DEBUG = 6
DIR_BOUND_IMPORT = 11
DIR_IAT = 12

SCN_CNT_CODE = 0x00000020
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000

DEBUG_DIRECTORY_SIZE = 28


class PeError(Exception):
    """Base class for PE parsing and layout errors."""


class NotPe(PeError):
    pass


class Truncated(PeError):
    pass


class Malformed(PeError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InconsistentLayout(PeError):
    pass


class UnmappedRva(PeError):
    pass


class Label(str, enum.Enum):
    BENIGN = "benign"
    MALICIOUS = "malicious"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, text: str) -> "Label":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown label {text!r}") from None


@dataclass(frozen=True)
class RawBinary:
    """One file's bytes plus its identity."""

    data: bytes
    label: Label = Label.UNKNOWN
    origin: str = ""
    sha256: str = field(default="", compare=False)

    def __post_init__(self):
        if len(self.data) < 1:
            raise ValueError("RawBinary needs at least one byte")
        data = bytes(self.data)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "sha256", hashlib.sha256(data).hexdigest())

    @classmethod
    def from_path(cls, path, label: Label = Label.UNKNOWN) -> "RawBinary":
        with open(path, "rb") as fh:
            return cls(fh.read(), label=label, origin=str(path))

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class Section:
    name: bytes
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_pointer: int
    characteristics: int
    header_offset: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.name) != 8:
            raise ValueError(f"section name must be exactly 8 bytes, got {len(self.name)}")

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    @property
    def raw_end(self) -> int:
        return self.raw_pointer + self.raw_size

    @property
    def virtual_extent(self) -> int:
        # loaders map virtual_size bytes; some linkers leave it zero
        return self.virtual_size or self.raw_size

    @property
    def is_executable(self) -> bool:
        return bool(self.characteristics & (SCN_MEM_EXECUTE | SCN_CNT_CODE))


@dataclass(frozen=True)
class PeFile:
    raw: RawBinary
    e_lfanew: int
    machine: int
    number_of_sections: int
    size_of_optional_header: int
    characteristics: int
    magic: int
    entry_point_rva: int
    image_base: int
    section_alignment: int
    file_alignment: int
    size_of_image: int
    size_of_headers: int
    checksum: int
    data_directories: Tuple[Tuple[int, int], ...]
    sections: Tuple[Section, ...]
    violations: Tuple[str, ...] = ()

    # ---- layout offsets derived from e_lfanew / magic ----

    @property
    def is_pe32plus(self) -> bool:
        return self.magic == PE32PLUS_MAGIC

    @property
    def data(self) -> bytes:
        return self.raw.data

    @property
    def coff_offset(self) -> int:
        return self.e_lfanew + 4

    @property
    def optional_header_offset(self) -> int:
        return self.coff_offset + COFF_HEADER_SIZE

    @property
    def entry_point_field_offset(self) -> int:
        return self.optional_header_offset + 16

    @property
    def size_of_image_field_offset(self) -> int:
        return self.optional_header_offset + 56

    @property
    def checksum_offset(self) -> int:
        return self.optional_header_offset + 64

    @property
    def data_directory_offset(self) -> int:
        return self.optional_header_offset + (112 if self.is_pe32plus else 96)

    @property
    def section_table_offset(self) -> int:
        return self.optional_header_offset + self.size_of_optional_header

    @property
    def section_table_end(self) -> int:
        return self.section_table_offset + SECTION_HEADER_SIZE * len(self.sections)

    @property
    def thunk_size(self) -> int:
        return 8 if self.is_pe32plus else 4

    def directory(self, index: int) -> Tuple[int, int]:
        if index < len(self.data_directories):
            return self.data_directories[index]
        return (0, 0)

    @property
    def sections_end(self) -> int:
        """File offset just past the last section's raw data."""
        ends = [s.raw_end for s in self.sections if s.raw_size]
        return max(ends) if ends else min(self.size_of_headers, len(self.data))

    @property
    def certificate_range(self) -> Optional[Tuple[int, int]]:
        off, size = self.directory(DIR_SECURITY)
        if not off or not size:
            return None
        return off, off + size

    @property
    def overlay_offset(self) -> int:
        end = self.sections_end
        cert = self.certificate_range
        if cert is not None and cert[1] > end:
            end = cert[1]
        return min(end, len(self.data))

    @property
    def overlay(self) -> bytes:
        return self.data[self.overlay_offset:]

    @property
    def image_end(self) -> int:
        """First RVA past every section, rounded to section_alignment."""
        end = align_up(self.size_of_headers, self.section_alignment)
        for s in self.sections:
            end = max(end, align_up(s.virtual_address + s.virtual_extent, self.section_alignment))
        return end

    def header_slack(self) -> int:
        """Free bytes between the end of the section table and the first raw data."""
        limit = self.size_of_headers
        for s in self.sections:
            if s.raw_size:
                limit = min(limit, s.raw_pointer)
        limit = min(limit, len(self.data))
        start = self.section_table_end
        if limit <= start:
            return 0
        tail = self.data[start:limit]
        # only trailing zero bytes count; anything else may be live header data
        return len(tail) - len(tail.rstrip(b"\0"))

    def with_section(self, index: int, **changes) -> "PeFile":
        secs = list(self.sections)
        secs[index] = replace(secs[index], **changes)
        return replace(self, sections=tuple(secs))


def align_up(value: int, alignment: int) -> int:
    if alignment <= 1:
        return value
    return (value + alignment - 1) // alignment * alignment


def _u16(data, off):
    return struct.unpack_from("<H", data, off)[0]


def _u32(data, off):
    return struct.unpack_from("<I", data, off)[0]


def parse_pe(raw, strict: bool = False) -> PeFile:
    """Parse ``raw`` (RawBinary or bytes) into a PeFile.

    In lenient mode structural problems are collected in ``violations``;
    ``strict=True`` raises Malformed instead.
    """
    if not isinstance(raw, RawBinary):
        if len(raw) == 0:
            raise NotPe("empty input")
        raw = RawBinary(bytes(raw))
    data = raw.data
    if data[:2] != b"MZ":
        raise NotPe("missing MZ magic")
    if len(data) < 0x40:
        raise Truncated("DOS header extends past end of file")
    e_lfanew = _u32(data, 0x3C)
    if e_lfanew + 4 + COFF_HEADER_SIZE > len(data):
        raise Truncated("PE header extends past end of file")
    if data[e_lfanew:e_lfanew + 4] != b"PE\0\0":
        raise NotPe("missing PE signature")
    coff = e_lfanew + 4
    machine, nsections, _, _, _, opt_size, chars = struct.unpack_from("<HHIIIHH", data, coff)
    opt = coff + COFF_HEADER_SIZE
    if opt + 2 > len(data):
        raise Truncated("optional header extends past end of file")
    magic = _u16(data, opt)
    if magic == PE32_MAGIC:
        fixed = 96
        image_base = _u32(data, opt + 28) if opt + 32 <= len(data) else 0
    elif magic == PE32PLUS_MAGIC:
        fixed = 112
        image_base = struct.unpack_from("<Q", data, opt + 24)[0] if opt + 32 <= len(data) else 0
    else:
        raise NotPe(f"unknown optional header magic 0x{magic:x}")
    if opt + fixed > len(data) or opt_size < fixed:
        raise Truncated("optional header extends past end of file")
    entry = _u32(data, opt + 16)
    sect_align, file_align = struct.unpack_from("<II", data, opt + 32)
    size_of_image, size_of_headers, checksum = struct.unpack_from("<III", data, opt + 56)
    ndirs = _u32(data, opt + fixed - 4)
    ndirs = min(ndirs, (opt_size - fixed) // 8, 16)
    dirs = []
    for i in range(ndirs):
        off = opt + fixed + 8 * i
        if off + 8 > len(data):
            raise Truncated("data directories extend past end of file")
        dirs.append(struct.unpack_from("<II", data, off))

    table = opt + opt_size
    if table + SECTION_HEADER_SIZE * nsections > len(data):
        raise Truncated("section table extends past end of file")
    sections = []
    for i in range(nsections):
        off = table + SECTION_HEADER_SIZE * i
        name = data[off:off + 8]
        vsize, va, rsize, rptr = struct.unpack_from("<IIII", data, off + 8)
        schars = _u32(data, off + 36)
        sections.append(Section(name, vsize, va, rsize, rptr, schars, header_offset=off))

    pe = PeFile(
        raw=raw,
        e_lfanew=e_lfanew,
        machine=machine,
        number_of_sections=nsections,
        size_of_optional_header=opt_size,
        characteristics=chars,
        magic=magic,
        entry_point_rva=entry,
        image_base=image_base,
        section_alignment=sect_align,
        file_alignment=file_align,
        size_of_image=size_of_image,
        size_of_headers=size_of_headers,
        checksum=checksum,
        data_directories=tuple(dirs),
        sections=tuple(sections),
    )
    problems = validate(pe)
    if problems and strict:
        raise Malformed(problems)
    return replace(pe, violations=tuple(problems))


def validate(pe: PeFile) -> List[str]:
    """Return a list of human-readable invariant violations (empty if none)."""
    out = []
    size = len(pe.data)
    if pe.data[pe.e_lfanew:pe.e_lfanew + 4] != b"PE\0\0":
        out.append("e_lfanew does not point at a PE signature")
    if pe.number_of_sections != len(pe.sections):
        out.append(
            f"number_of_sections={pe.number_of_sections} but {len(pe.sections)} headers"
        )
    if pe.section_table_end > size:
        out.append("section table extends past end of file")
    for i, s in enumerate(pe.sections):
        if s.raw_size and s.raw_end > size:
            out.append(f"section {i} ({s.display_name}) raw data extends past end of file")
        if s.raw_size and pe.file_alignment and s.raw_pointer % pe.file_alignment:
            out.append(f"section {i} ({s.display_name}) raw pointer not file-aligned")
    with_raw = sorted(
        ((s.raw_pointer, s.raw_end, i) for i, s in enumerate(pe.sections) if s.raw_size),
    )
    for (a0, a1, ia), (b0, b1, ib) in zip(with_raw, with_raw[1:]):
        if b0 < a1:
            out.append(f"sections {ia} and {ib} have overlapping raw ranges")
    prev_end = None
    for i, s in enumerate(pe.sections):
        if prev_end is not None and s.virtual_address < prev_end:
            out.append(f"section {i} ({s.display_name}) virtual range overlaps or is out of order")
        prev_end = s.virtual_address + align_up(s.virtual_extent, pe.section_alignment)
    return out


def serialize(pe: PeFile) -> bytes:
    """Write the modeled fields back over the original bytes.

    Raw section data is not moved; layout-changing edits go through the
    byte-level helpers in :mod:`subterfuge.mutations`.
    """
    ranges = sorted((s.raw_pointer, s.raw_end) for s in pe.sections if s.raw_size)
    for (a0, a1), (b0, b1) in zip(ranges, ranges[1:]):
        if b0 < a1:
            raise InconsistentLayout(f"raw ranges [{a0},{a1}) and [{b0},{b1}) overlap")
    if pe.number_of_sections != len(pe.sections):
        raise InconsistentLayout("number_of_sections disagrees with section list")
    out = bytearray(pe.data)
    need = pe.section_table_end
    if need > len(out):
        raise InconsistentLayout("section table does not fit in file")
    struct.pack_into("<H", out, pe.coff_offset + 2, pe.number_of_sections)
    struct.pack_into("<I", out, pe.entry_point_field_offset, pe.entry_point_rva)
    struct.pack_into("<I", out, pe.size_of_image_field_offset, pe.size_of_image)
    struct.pack_into("<I", out, pe.checksum_offset, pe.checksum)
    for i, (rva, size) in enumerate(pe.data_directories):
        struct.pack_into("<II", out, pe.data_directory_offset + 8 * i, rva, size)
    for i, s in enumerate(pe.sections):
        off = pe.section_table_offset + SECTION_HEADER_SIZE * i
        out[off:off + 8] = s.name
        struct.pack_into("<IIII", out, off + 8, s.virtual_size, s.virtual_address,
                         s.raw_size, s.raw_pointer)
        struct.pack_into("<I", out, off + 36, s.characteristics)
    return bytes(out)


def rva_to_offset(pe: PeFile, rva: int) -> int:
    if 0 <= rva < min(pe.size_of_headers, len(pe.data)):
        return rva
    for s in pe.sections:
        if s.virtual_address <= rva < s.virtual_address + s.raw_size:
            off = s.raw_pointer + (rva - s.virtual_address)
            if off < len(pe.data):
                return off
    raise UnmappedRva(f"RVA 0x{rva:x} is not backed by file data")


def offset_to_rva(pe: PeFile, offset: int) -> int:
    for s in pe.sections:
        if s.raw_pointer <= offset < s.raw_end:
            return s.virtual_address + (offset - s.raw_pointer)
    if offset < pe.size_of_headers:
        return offset
    raise UnmappedRva(f"offset 0x{offset:x} is not inside any section")


def checksum_field_offset(data: bytes) -> int:
    """Checksum location implied by the e_lfanew field (no magic checks)."""
    if len(data) < 0x40:
        raise Truncated("file too short to hold e_lfanew")
    return _u32(data, 0x3C) + 4 + COFF_HEADER_SIZE + 64


def compute_pe_checksum(data: bytes, field_offset: Optional[int] = None) -> int:
    """Standard optional-header checksum.

    16-bit little-endian words are summed with end-around carry, skipping the
    checksum field, and the file length is added at the end.
    """
    if field_offset is None:
        field_offset = checksum_field_offset(data)
    if len(data) < field_offset + 4:
        raise Truncated("checksum field lies past end of file")
    buf = bytearray(data)
    buf[field_offset:field_offset + 4] = b"\0\0\0\0"
    if len(buf) % 2:
        buf.append(0)
    total = int(np.frombuffer(bytes(buf), dtype="<u2").sum(dtype=np.uint64))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (total + len(data)) & 0xFFFFFFFF


# ---- directory readers used by the mutation engine ----


def _read_cstring(data: bytes, off: int, limit: int = 512) -> bytes:
    end = data.find(b"\0", off, off + limit)
    if end < 0:
        raise PeError(f"unterminated string at 0x{off:x}")
    return data[off:end]


@dataclass(frozen=True)
class ImportDescriptor:
    original_first_thunk: int
    timestamp: int
    forwarder_chain: int
    name_rva: int
    first_thunk: int
    dll: str
    functions: Tuple[str, ...]


def parse_imports(pe: PeFile) -> List[ImportDescriptor]:
    """Decode the import directory. Ordinal imports show up as ``#<n>``."""
    rva, size = pe.directory(DIR_IMPORT)
    if not rva:
        return []
    data = pe.data
    off = rva_to_offset(pe, rva)
    out = []
    ordinal_flag = 1 << (63 if pe.is_pe32plus else 31)
    fmt = "<Q" if pe.is_pe32plus else "<I"
    while off + 20 <= len(data):
        oft, ts, fwd, name_rva, ft = struct.unpack_from("<IIIII", data, off)
        if not (oft or ts or fwd or name_rva or ft):
            break
        dll = _read_cstring(data, rva_to_offset(pe, name_rva)).decode("latin-1")
        funcs = []
        thunk = oft or ft
        toff = rva_to_offset(pe, thunk)
        while True:
            (value,) = struct.unpack_from(fmt, data, toff)
            if value == 0:
                break
            if value & ordinal_flag:
                funcs.append(f"#{value & 0xFFFF}")
            else:
                hoff = rva_to_offset(pe, value & 0x7FFFFFFF)
                funcs.append(_read_cstring(data, hoff + 2).decode("latin-1"))
            toff += pe.thunk_size
        out.append(ImportDescriptor(oft, ts, fwd, name_rva, ft, dll, tuple(funcs)))
        off += 20
    return out


@dataclass(frozen=True)
class DebugEntry:
    entry_offset: int  # file offset of the 28-byte directory entry
    timestamp: int
    type: int
    size_of_data: int
    address_of_raw_data: int
    pointer_to_raw_data: int


def parse_debug(pe: PeFile) -> List[DebugEntry]:
    rva, size = pe.directory(DIR_DEBUG)
    if not rva or not size:
        return []
    off = rva_to_offset(pe, rva)
    out = []
    for i in range(size // DEBUG_DIRECTORY_SIZE):
        eoff = off + i * DEBUG_DIRECTORY_SIZE
        if eoff + DEBUG_DIRECTORY_SIZE > len(pe.data):
            break
        _, ts, _, _, dtype, dsize, addr, ptr = struct.unpack_from("<IIHHIIII", pe.data, eoff)
        out.append(DebugEntry(eoff, ts, dtype, dsize, addr, ptr))
    return out


def build_import_table(base_rva, existing, new, thunk_size):
    """Lay out an import directory at ``base_rva``.

    ``existing`` holds raw 20-byte descriptors copied verbatim (their thunk
    arrays stay where they are, so code that calls through the old IAT keeps
    working). ``new`` is a list of ``(dll, [function, ...])`` pairs that get
    fresh lookup/address tables, hint/name entries and name strings.

    Returns ``(blob, descriptor_table_size)``.
    """
    ndesc = len(existing) + len(new)
    desc_size = 20 * (ndesc + 1)
    fmt = "<Q" if thunk_size == 8 else "<I"
    cursor = desc_size
    thunk_layout = []
    for dll, funcs in new:
        ilt = cursor
        cursor += thunk_size * (len(funcs) + 1)
        iat = cursor
        cursor += thunk_size * (len(funcs) + 1)
        thunk_layout.append((ilt, iat))
    strings = bytearray()
    name_offsets = []
    hint_offsets = []
    for dll, funcs in new:
        hints = []
        for fn in funcs:
            if (cursor + len(strings)) % 2:
                strings.append(0)
            hints.append(cursor + len(strings))
            strings.extend(b"\0\0" + fn.encode("latin-1") + b"\0")
        hint_offsets.append(hints)
        name_offsets.append(cursor + len(strings))
        strings.extend(dll.encode("latin-1") + b"\0")
    blob = bytearray(cursor)
    for i, desc in enumerate(existing):
        blob[20 * i:20 * i + 20] = desc
    for j, (dll, funcs) in enumerate(new):
        ilt, iat = thunk_layout[j]
        struct.pack_into("<IIIII", blob, 20 * (len(existing) + j),
                         base_rva + ilt, 0, 0, base_rva + name_offsets[j], base_rva + iat)
        for k, hint in enumerate(hint_offsets[j]):
            struct.pack_into(fmt, blob, ilt + thunk_size * k, base_rva + hint)
            struct.pack_into(fmt, blob, iat + thunk_size * k, base_rva + hint)
    blob.extend(strings)
    return bytes(blob), desc_size
