import hashlib
import struct

import numpy as np
import pefile
import pytest
from hypothesis import given, settings, strategies as st

from conftest import rich_pe
from oracles import pe_checksum
from subterfuge.pe import (DIR_DEBUG, DIR_IMPORT, DIR_SECURITY, InconsistentLayout, Label, Malformed,
                           NotPe, RawBinary, Truncated, UnmappedRva, align_up, compute_pe_checksum,
                           offset_to_rva, parse_debug, parse_imports, parse_pe, rva_to_offset,
                           serialize, validate)
from subterfuge.synth import CODE, SectionSpec, build_pe, minimal_pe


def test_minimal_pe_fields_agree_with_pefile():
    data = minimal_pe()
    pe = parse_pe(data, strict=True)
    ref = pefile.PE(data=data)
    assert pe.machine == ref.FILE_HEADER.Machine
    assert pe.number_of_sections == ref.FILE_HEADER.NumberOfSections
    assert pe.entry_point_rva == ref.OPTIONAL_HEADER.AddressOfEntryPoint
    assert pe.image_base == ref.OPTIONAL_HEADER.ImageBase
    assert pe.size_of_image == ref.OPTIONAL_HEADER.SizeOfImage
    assert pe.size_of_headers == ref.OPTIONAL_HEADER.SizeOfHeaders
    assert pe.checksum == ref.OPTIONAL_HEADER.CheckSum
    for mine, theirs in zip(pe.sections, ref.sections):
        assert mine.name == theirs.Name
        assert mine.virtual_address == theirs.VirtualAddress
        assert mine.raw_pointer == theirs.PointerToRawData
        assert mine.raw_size == theirs.SizeOfRawData


@pytest.mark.parametrize("seed", range(8))
def test_rich_pe_agrees_with_pefile(seed):
    data = rich_pe(np.random.default_rng(seed))
    pe = parse_pe(data, strict=True)
    ref = pefile.PE(data=data)
    assert pe.is_pe32plus == (ref.OPTIONAL_HEADER.Magic == 0x20B)
    theirs = {(e.dll.decode().lower(), i.name.decode()) for e in ref.DIRECTORY_ENTRY_IMPORT
              for i in e.imports}
    mine = {(d.dll.lower(), f) for d in parse_imports(pe) for f in d.functions}
    assert mine == theirs
    dbg = parse_debug(pe)
    assert [e.pointer_to_raw_data for e in dbg] == [
        e.struct.PointerToRawData for e in ref.DIRECTORY_ENTRY_DEBUG]
    cert = ref.OPTIONAL_HEADER.DATA_DIRECTORY[DIR_SECURITY]
    assert pe.certificate_range == (cert.VirtualAddress, cert.VirtualAddress + cert.Size)


def test_checksum_matches_pefile_and_oracle():
    for seed in range(6):
        data = rich_pe(np.random.default_rng(100 + seed))
        ours = compute_pe_checksum(data)
        assert ours == pe_checksum(data)
        assert ours == pefile.PE(data=data).generate_checksum()
        assert ours == parse_pe(data).checksum


@pytest.mark.parametrize("n", [92, 93, 4096, 4097, 65536])
def test_checksum_of_zero_file_is_its_length(n):
    assert compute_pe_checksum(bytes(n)) == n


def test_checksum_ignores_field_contents():
    data = bytearray(minimal_pe())
    pe = parse_pe(bytes(data))
    before = compute_pe_checksum(bytes(data))
    struct.pack_into("<I", data, pe.checksum_offset, 0xDEADBEEF)
    assert compute_pe_checksum(bytes(data)) == before


@pytest.mark.parametrize("pe32plus", [False, True])
def test_serialize_round_trip(pe32plus):
    data = minimal_pe(pe32plus=pe32plus, certificate=b"x" * 40, overlay=b"tail")
    assert serialize(parse_pe(data)) == data


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_round_trip_property(seed):
    data = rich_pe(np.random.default_rng(seed))
    pe = parse_pe(data, strict=True)
    assert pe.violations == ()
    assert serialize(pe) == data


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rva_offset_inverse(seed):
    rng = np.random.default_rng(seed)
    pe = parse_pe(rich_pe(rng))
    s = pe.sections[int(rng.integers(len(pe.sections)))]
    off = s.raw_pointer + int(rng.integers(s.raw_size))
    assert rva_to_offset(pe, offset_to_rva(pe, off)) == off


def test_unmapped_rva():
    pe = parse_pe(minimal_pe())
    with pytest.raises(UnmappedRva):
        rva_to_offset(pe, 0x7FFF0000)


def test_header_modeled_fields_patch_back():
    pe = parse_pe(minimal_pe())
    out = serialize(pe.with_section(0, name=b".code\0\0\0"))
    assert parse_pe(out).sections[0].display_name == ".code"
    assert len(out) == len(pe.data)


def test_not_pe_and_truncated():
    with pytest.raises(NotPe):
        parse_pe(b"")
    with pytest.raises(NotPe):
        parse_pe(b"ZM" + bytes(200))
    with pytest.raises(Truncated):
        parse_pe(b"MZ" + bytes(10))
    data = minimal_pe()
    with pytest.raises(Truncated):
        parse_pe(data[:parse_pe(data).e_lfanew + 30])
    bad = bytearray(data)
    bad[parse_pe(data).e_lfanew] = ord("X")
    with pytest.raises(NotPe):
        parse_pe(bytes(bad))


def test_strict_versus_lenient():
    data = bytearray(minimal_pe())
    pe = parse_pe(bytes(data))
    s = pe.sections[0]
    struct.pack_into("<I", data, s.header_offset + 16, len(data))  # raw size past EOF
    lenient = parse_pe(bytes(data))
    assert any("past end of file" in v for v in lenient.violations)
    with pytest.raises(Malformed) as exc:
        parse_pe(bytes(data), strict=True)
    assert exc.value.violations


def test_overlapping_sections_detected_and_not_serialized():
    data = build_pe([SectionSpec(".a", b"a" * 600, CODE), SectionSpec(".b", b"b" * 100, CODE)]).data
    pe = parse_pe(data)
    second = pe.sections[1]
    bad = pe.with_section(1, raw_pointer=pe.sections[0].raw_pointer + 0x200)
    assert any("overlapping" in v for v in validate(bad))
    with pytest.raises(InconsistentLayout):
        serialize(bad)
    assert second.raw_pointer % pe.file_alignment == 0


def test_overlay_and_certificate_layout():
    data = minimal_pe(certificate=b"c" * 30, overlay=b"OVERLAY!")
    pe = parse_pe(data)
    start, end = pe.certificate_range
    assert data[end:] == b"OVERLAY!"
    assert pe.overlay_offset == end
    assert pe.overlay == b"OVERLAY!"
    assert start >= pe.sections_end


def test_header_slack_is_exact():
    for slack in (0, 40, 128, 400):
        pe = parse_pe(minimal_pe(header_slack=slack))
        assert pe.header_slack() == align_up(slack, 8)


def test_directories():
    data = minimal_pe(debug=True)
    pe = parse_pe(data)
    assert pe.directory(DIR_IMPORT)[0] != 0
    assert pe.directory(DIR_DEBUG)[1] == 28
    assert list(parse_imports(pe)[0].functions) == ["ExitProcess"]


def test_raw_binary_identity(tmp_path):
    p = tmp_path / "f.bin"
    p.write_bytes(b"MZabc")
    b = RawBinary.from_path(p, Label.MALICIOUS)
    assert b.origin == str(p)
    assert b.sha256 == hashlib.sha256(b"MZabc").hexdigest()
    assert RawBinary(b"MZabc") == RawBinary(b"MZabc")
    with pytest.raises(ValueError):
        RawBinary(b"")
    assert Label.parse("Malicious") is Label.MALICIOUS
    with pytest.raises(ValueError):
        Label.parse("evil")
