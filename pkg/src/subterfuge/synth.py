"""Hand-assembled PE images for tests and synthetic corpora.

The builder only emits what :mod:`subterfuge.pe` models plus an import table,
an optional CodeView debug record and an optional attribute certificate. The
output is never meant to run; it is structurally valid so every mutation has
something real to work on.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .pe import (
    DIR_DEBUG,
    DIR_IMPORT,
    DIR_SECURITY,
    PE32_MAGIC,
    PE32PLUS_MAGIC,
    SCN_CNT_CODE,
    SCN_CNT_INITIALIZED_DATA,
    SCN_MEM_EXECUTE,
    SCN_MEM_READ,
    SCN_MEM_WRITE,
    align_up,
    build_import_table,
    compute_pe_checksum,
)

CODE = SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ
RDATA = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ
DATA = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE

DOS_STUB = b"This program cannot be run in DOS mode.\r\r\n$"


@dataclass
class SectionSpec:
    name: str
    data: bytes
    characteristics: int = CODE
    virtual_size: Optional[int] = None


@dataclass
class BuiltPe:
    data: bytes
    section_rvas: List[int]
    import_rva: int = 0
    debug_rva: int = 0
    certificate_offset: int = 0


def _codeview_payload(tag: bytes) -> bytes:
    guid = (tag * 16)[:16].ljust(16, b"\0")
    return b"RSDS" + guid + struct.pack("<I", 1) + b"C:\\build\\release\\app.pdb\0"


def build_pe(
    sections: Sequence[SectionSpec],
    *,
    entry: Tuple[int, int] = (0, 0),
    imports: Optional[Dict[str, List[str]]] = None,
    import_section: int = 0,
    debug: bool = False,
    debug_section: int = 0,
    certificate: Optional[bytes] = None,
    overlay: bytes = b"",
    pe32plus: bool = False,
    header_slack: int = 256,
    file_alignment: int = 0x200,
    section_alignment: int = 0x1000,
    set_checksum: bool = True,
    timestamp: int = 0x5E0BE100,
) -> BuiltPe:
    """Assemble a PE image.

    ``header_slack`` is the exact number of zero bytes left between the end
    of the section table and the first section's raw data. ``entry`` is
    (section index, offset into that section's data).
    """
    n = len(sections)
    opt_size = 240 if pe32plus else 224
    table_len = 4 + 20 + opt_size + 40 * n
    header_slack = align_up(header_slack, 8)
    size_of_headers = align_up(0x40 + table_len + header_slack, file_alignment)
    e_lfanew = size_of_headers - table_len - header_slack
    thunk = 8 if pe32plus else 4

    va = align_up(size_of_headers, section_alignment)
    raw = size_of_headers
    headers = []
    bodies = []
    rvas = []
    dirs = [(0, 0)] * 16
    for i, spec in enumerate(sections):
        body = bytearray(spec.data)
        if imports and i == import_section:
            body.extend(b"\0" * (-len(body) % 8))
            imp_rva = va + len(body)
            blob, desc_size = build_import_table(imp_rva, [], list(imports.items()), thunk)
            body.extend(blob)
            dirs[DIR_IMPORT] = (imp_rva, desc_size)
        if debug and i == debug_section:
            body.extend(b"\0" * (-len(body) % 4))
            dir_rva = va + len(body)
            payload = _codeview_payload(spec.name.encode())
            payload_rva = dir_rva + 28
            entry_bytes = struct.pack(
                "<IIHHIIII", 0, timestamp, 0, 0, 2, len(payload), payload_rva,
                raw + (payload_rva - va),
            )
            body.extend(entry_bytes + payload)
            dirs[DIR_DEBUG] = (dir_rva, 28)
        vsize = spec.virtual_size if spec.virtual_size is not None else len(body)
        rsize = align_up(len(body), file_alignment)
        headers.append((spec.name.encode().ljust(8, b"\0")[:8], vsize, va, rsize, raw,
                        spec.characteristics))
        bodies.append(bytes(body).ljust(rsize, b"\0"))
        rvas.append(va)
        va = align_up(va + max(vsize, 1), section_alignment)
        raw += rsize
    size_of_image = va

    out = bytearray(size_of_headers)
    out[0:2] = b"MZ"
    struct.pack_into("<I", out, 0x3C, e_lfanew)
    if e_lfanew >= 0x40 + 14 + len(DOS_STUB):
        out[0x4E:0x4E + len(DOS_STUB)] = DOS_STUB
    out[e_lfanew:e_lfanew + 4] = b"PE\0\0"
    coff = e_lfanew + 4
    machine = 0x8664 if pe32plus else 0x14C
    chars = 0x0022 if pe32plus else 0x0102
    struct.pack_into("<HHIIIHH", out, coff, machine, n, timestamp, 0, 0, opt_size, chars)
    opt = coff + 20
    entry_rva = rvas[entry[0]] + entry[1] if n else 0
    size_code = sum(h[3] for h in headers if h[5] & SCN_CNT_CODE)
    size_init = sum(h[3] for h in headers if h[5] & SCN_CNT_INITIALIZED_DATA)
    base_of_code = next((h[2] for h in headers if h[5] & SCN_CNT_CODE), 0)
    if pe32plus:
        struct.pack_into(
            "<HBBIIIIIQIIHHHHHHIIIIHHQQQQII", out, opt,
            PE32PLUS_MAGIC, 14, 0, size_code, size_init, 0, entry_rva, base_of_code,
            0x140000000, section_alignment, file_alignment, 6, 0, 0, 0, 6, 0, 0,
            size_of_image, size_of_headers, 0, 3, 0x8160,
            0x100000, 0x1000, 0x100000, 0x1000, 0, 16,
        )
        dir_off = opt + 112
    else:
        struct.pack_into(
            "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII", out, opt,
            PE32_MAGIC, 14, 0, size_code, size_init, 0, entry_rva, base_of_code, 0,
            0x400000, section_alignment, file_alignment, 6, 0, 0, 0, 6, 0, 0,
            size_of_image, size_of_headers, 0, 3, 0x8140,
            0x100000, 0x1000, 0x100000, 0x1000, 0, 16,
        )
        dir_off = opt + 96
    table = opt + opt_size
    for i, (name, vsize, sva, rsize, rptr, schars) in enumerate(headers):
        off = table + 40 * i
        out[off:off + 8] = name
        struct.pack_into("<IIIIIIHHI", out, off + 8, vsize, sva, rsize, rptr, 0, 0, 0, 0, schars)
    for body in bodies:
        out.extend(body)

    cert_off = 0
    if certificate is not None:
        out.extend(b"\0" * (-len(out) % 8))
        cert_off = len(out)
        length = align_up(8 + len(certificate), 8)
        win_cert = struct.pack("<IHH", length, 0x0200, 0x0002) + certificate
        out.extend(win_cert.ljust(length, b"\0"))
        dirs[DIR_SECURITY] = (cert_off, length)
    out.extend(overlay)
    for i, (rva, size) in enumerate(dirs):
        struct.pack_into("<II", out, dir_off + 8 * i, rva, size)
    if set_checksum:
        struct.pack_into("<I", out, opt + 64, compute_pe_checksum(bytes(out), opt + 64))
    return BuiltPe(
        data=bytes(out),
        section_rvas=rvas,
        import_rva=dirs[DIR_IMPORT][0],
        debug_rva=dirs[DIR_DEBUG][0],
        certificate_offset=cert_off,
    )


def minimal_pe(**kwargs) -> bytes:
    """One ``.text`` section holding ``xor eax, eax; ret`` and one import."""
    kwargs.setdefault("imports", {"kernel32.dll": ["ExitProcess"]})
    text = SectionSpec(".text", b"\x31\xc0\xc3" + b"\x90" * 61, CODE | SCN_CNT_INITIALIZED_DATA)
    return build_pe([text], **kwargs).data
