import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from subterfuge.detectors import ConstantDetector, CountingDetector, DetectorError, FunctionDetector
from subterfuge.occlusion import (ByteSource, DetectorFailure, FileTooSmall, NotMalicious,
                                  OcclusionConfig, RangeOutOfBounds, SourceKind, TieBreak,
                                  occlude_region, occlusion_search, targeted_occlusion_attack,
                                  undirected_occlusion, undirected_occlusion_window)
from subterfuge.pe import Label, RawBinary


def levels_needed(n, beta):
    k = 0
    while n > beta * 2**k:
        k += 1
    return k


def planted(n, offset, sig):
    rng = np.random.default_rng(n + offset)
    data = bytearray(rng.bytes(n))
    data[offset:offset + len(sig)] = sig
    return bytes(data)


def intact_fraction(sig, offset):
    ref = np.frombuffer(sig, dtype=np.uint8)

    def score(data):
        got = np.frombuffer(bytes(data[offset:offset + len(sig)]), dtype=np.uint8)
        return float(np.mean(got == ref))
    return score


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 1 << 16), st.integers(1, 4096))
def test_call_count_and_window_for_any_size(n, beta):
    if n <= beta:
        with pytest.raises(FileTooSmall):
            occlusion_search(bytes(n), ConstantDetector(1.0), OcclusionConfig(beta=beta))
        return
    det = CountingDetector(ConstantDetector(1.0))
    out = occlusion_search(bytes(n), det, OcclusionConfig(beta=beta, source=ByteSource.zeros()))
    assert out.calls == det.calls == 2 * levels_needed(n, beta)
    assert beta / 2 < out.length <= beta
    assert 0 <= out.start < out.end <= n


def test_trace_halves_are_contiguous_and_nested():
    sig = b"S" * 64
    data = planted(1 << 14, 9000, sig)
    det = FunctionDetector(intact_fraction(sig, 9000))
    out = occlusion_search(data, det, OcclusionConfig(beta=256))
    lo, hi = 0, len(data)
    for lvl in out.trace:
        assert (lvl.start, lvl.end) == (lo, hi)
        assert lvl.mid == lo + (hi - lo + 1) // 2
        lo, hi = (lo, lvl.mid) if lvl.choice == "left" else (lvl.mid, hi)
    assert (lo, hi) == (out.start, out.end)
    assert out.start <= 9000 < out.end


@pytest.mark.parametrize("tie,expect", [(TieBreak.LEFT, (0, 512)), (TieBreak.RIGHT, (3584, 4096))])
def test_tie_break(tie, expect):
    out = occlusion_search(bytes(4096), ConstantDetector(0.7), OcclusionConfig(beta=512, tie_break=tie))
    assert (out.start, out.end) == expect
    assert all(lvl.choice == tie.value for lvl in out.trace)


def test_search_does_not_touch_input_and_sees_occlusions():
    data = bytes(range(256)) * 32
    seen = []

    def score(view):
        seen.append(bytes(view))
        return 0.5

    occlusion_search(data, FunctionDetector(score), OcclusionConfig(beta=1024))
    assert all(len(s) == len(data) for s in seen)
    assert all(s != data for s in seen)
    assert data == bytes(range(256)) * 32


def test_detector_failure_carries_trace():
    calls = []

    def score(view):
        calls.append(1)
        if len(calls) > 3:
            raise DetectorError("boom")
        return 0.5

    with pytest.raises(DetectorFailure) as exc:
        occlusion_search(bytes(8192), FunctionDetector(score), OcclusionConfig(beta=256))
    assert len(exc.value.trace) == 1


def test_targeted_attack_evades_signature_detector():
    sig = bytes(range(64))
    data = planted(50000, 31337, sig)
    det = FunctionDetector(intact_fraction(sig, 31337), threshold=0.9)
    occluded, out = targeted_occlusion_attack(RawBinary(data), det, OcclusionConfig(beta=2048))
    assert out.evaded and out.occluded_score < 0.9
    assert out.baseline_score == 1.0
    assert len(occluded) == len(data)
    assert occluded[:out.start] == data[:out.start] and occluded[out.end:] == data[out.end:]


def test_targeted_attack_needs_malicious_file():
    with pytest.raises(NotMalicious):
        targeted_occlusion_attack(bytes(8192), ConstantDetector(0.1))


def test_occlude_region_bounds():
    with pytest.raises(RangeOutOfBounds):
        occlude_region(bytes(10), 5, 5, ByteSource.zeros())
    with pytest.raises(RangeOutOfBounds):
        occlude_region(bytes(10), 5, 11, ByteSource.zeros())
    assert occlude_region(b"\x01" * 10, 2, 4, ByteSource.zeros()) == b"\x01\x01\0\0" + b"\x01" * 6


def test_byte_sources_are_keyed():
    r = ByteSource.random(3)
    assert r.draw(100, 1) == r.draw(100, 1)
    assert r.draw(100, 1) != r.draw(100, 2)
    assert ByteSource.zeros().draw(5) == bytes(5)
    pool = [b"a" * 50, b"b" * 300]
    b = ByteSource.benign(pool, seed=1)
    assert b.kind is SourceKind.BENIGN
    assert b.draw(200) == b"b" * 200
    assert b.contiguous(300) and not b.contiguous(301)
    stitched = b.draw(700, 4)
    assert len(stitched) == 700 and set(stitched) <= set(b"ab")


def test_benign_source_rejects_malicious_and_empty():
    with pytest.raises(ValueError):
        ByteSource.benign([RawBinary(b"MZ", Label.MALICIOUS)])
    with pytest.raises(ValueError):
        ByteSource.benign([])


def test_source_fallback_flag():
    cfg = OcclusionConfig(beta=1024, source=ByteSource.benign([b"x" * 100]))
    out = occlusion_search(bytes(4096), ConstantDetector(1.0), cfg)
    assert out.source_fallback


def test_undirected_window():
    data = bytes(5000)
    out, a, b = undirected_occlusion_window(data, 2048, 7)
    assert b - a == 2048 and 0 <= a and b <= 5000
    assert out[:a] == data[:a] and out[b:] == data[b:]
    assert undirected_occlusion(data, 2048, 7) == out
    with pytest.raises(FileTooSmall):
        undirected_occlusion(bytes(10), 2048, 0)


def test_beta_must_be_positive():
    with pytest.raises(ValueError):
        OcclusionConfig(beta=0)


def test_sixteen_byte_hand_trace_and_brute_force():
    data = b"\xff" * 16
    oracle = FunctionDetector(lambda d: 1.0 if d[11] == 0xFF else 0.0)
    cfg = OcclusionConfig(beta=2, source=ByteSource.zeros())
    out = occlusion_search(data, oracle, cfg)
    assert (out.start, out.end) == (10, 12)
    assert out.calls == 6
    assert [(lvl.start, lvl.end, lvl.choice) for lvl in out.trace] == [
        (0, 16, "right"), (8, 16, "left"), (8, 12, "right")]
    scores = {i: oracle.scan(occlude_region(data, i, i + 2, ByteSource.zeros())).score
              for i in range(15)}
    best = min(scores.values())
    assert scores[out.start] == best
    assert {i for i, s in scores.items() if s == best} == {10, 11}
