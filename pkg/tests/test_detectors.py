import sys
import threading

import numpy as np
import pytest

from subterfuge.adapter import (AdapterConfig, AdapterCrashed, AdapterProtocolError, AdapterScanError,
                                AdapterTimeout, ExternalDetector, external_scan, parse_reply)
from subterfuge.detectors import (ConstantDetector, CountingDetector, Detector, FunctionDetector,
                                  NGramDetector, ScoreOutOfRange, decide)
from subterfuge.ngram import NGramModel, save_model
from subterfuge.pe import Label

ECHO = [sys.executable, "-m", "subterfuge.adapters.echo"]


def echo(*flags, **kw):
    return ExternalDetector(AdapterConfig(ECHO + list(flags), **kw), id="echo")


def test_threshold_decision():
    assert decide(0.5, 0.5) is Label.MALICIOUS
    assert decide(0.4999, 0.5) is Label.BENIGN
    r = ConstantDetector(0.8, threshold=0.9).scan(b"x")
    assert r.decision is Label.BENIGN and not r.malicious and r.score == 0.8


def test_invalid_threshold_and_scores():
    with pytest.raises(ValueError):
        ConstantDetector(threshold=1.5)
    with pytest.raises(ScoreOutOfRange):
        FunctionDetector(lambda d: 1.2).scan(b"")
    with pytest.raises(ScoreOutOfRange):
        FunctionDetector(lambda d: float("nan")).scan(b"")
    with pytest.raises(NotImplementedError):
        Detector("x").scan(b"")


def test_counting_and_context_manager():
    with CountingDetector(ConstantDetector(1.0)) as det:
        for _ in range(3):
            det.scan(b"")
    assert det.calls == 3


def test_ngram_detector_from_file(tmp_path):
    m = NGramModel(6, 32, np.full(32, 5.0), -1.0)
    p = tmp_path / "m.bin"
    save_model(m, p)
    det = NGramDetector.from_path(p, threshold=0.9)
    assert det.scan(b"abcdefgh").malicious
    assert not det.scan(b"abc").malicious  # no grams, score = logistic(-1)


@pytest.mark.parametrize("line,score", [("SCORE 0.25", 0.25), ("SCORE 1", 1.0), ("SCORE 0.0\n", 0.0),
                                        ("DECISION MALICIOUS", 1.0), ("DECISION benign", 0.0)])
def test_parse_reply(line, score):
    assert parse_reply(line) == score


@pytest.mark.parametrize("line", ["SCORE 1.5", "SCORE -0.1", "SCORE nan", "SCORE x", "DECISION maybe",
                                  "HELLO", ""])
def test_parse_reply_rejects(line):
    with pytest.raises(AdapterProtocolError):
        parse_reply(line)


def test_parse_reply_error():
    with pytest.raises(AdapterScanError, match="disk full"):
        parse_reply("ERROR disk full")


def test_adapter_config_validation():
    assert AdapterConfig("a b 'c d'").command == ("a", "b", "c d")
    with pytest.raises(ValueError):
        AdapterConfig([])
    with pytest.raises(ValueError):
        AdapterConfig(["x"], scan_timeout=0)


def test_echo_score_and_marker(tmp_path):
    with echo("--score", "0.75") as det:
        assert det.scan(b"whatever").score == 0.75
    with echo("--marker", "deadbeef") as det:
        assert det.scan(b"xx\xde\xad\xbe\xefyy").malicious
        assert not det.scan(b"clean").malicious
        f = tmp_path / "f.bin"
        f.write_bytes(b"\xde\xad\xbe\xef")
        assert external_scan(det, f).score == 1.0


def test_echo_decision_and_error():
    with echo("--decision", "benign") as det:
        assert det.scan(b"").decision is Label.BENIGN
    with echo("--error", "cannot read") as det:
        with pytest.raises(AdapterScanError):
            det.scan(b"")


def test_out_of_range_reply_restarts():
    det = echo("--raw", "SCORE 7")
    try:
        with pytest.raises(AdapterProtocolError):
            det.scan(b"")
        assert not det.alive
    finally:
        det.close()


def test_timeout_then_restart():
    det = echo("--hang", scan_timeout=0.5)
    try:
        with pytest.raises(AdapterTimeout):
            det.scan(b"")
        assert not det.alive
        with pytest.raises(AdapterTimeout):
            det.scan(b"")
        assert det.restarts == 1
    finally:
        det.close()


def test_crash_restart(tmp_path):
    state = tmp_path / "crashed"
    with echo("--crash-once", str(state), "--score", "0.6") as det:
        with pytest.raises(AdapterCrashed):
            det.scan(b"")
        assert det.scan(b"").score == 0.6
        assert det.restarts == 1


def test_no_restart_when_disabled(tmp_path):
    det = ExternalDetector(AdapterConfig(ECHO + ["--crash-after", "1"], restart_on_error=False))
    try:
        with pytest.raises(AdapterCrashed):
            det.scan(b"")
        with pytest.raises(AdapterCrashed):
            det.scan(b"")
    finally:
        det.close()


def test_startup_failures():
    silent = echo("--no-ready", startup_timeout=0.5)
    with pytest.raises(AdapterTimeout):
        silent.scan(b"")
    silent.close()
    greeter = ExternalDetector(AdapterConfig([sys.executable, "-c", "print('HELLO')"]))
    with pytest.raises(AdapterProtocolError):
        greeter.scan(b"")
    greeter.close()
    det = echo("--ready-delay", "2", startup_timeout=0.3)
    with pytest.raises(AdapterTimeout):
        det.scan(b"")
    det.close()
    with pytest.raises(AdapterCrashed):
        ExternalDetector(AdapterConfig(["/nonexistent/adapter"])).scan(b"")


def test_scans_are_serialized_across_threads():
    results = []
    with echo("--score", "0.3") as det:
        threads = [threading.Thread(target=lambda: results.append(det.scan(b"z").score))
                   for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    assert results == [0.3] * 8
