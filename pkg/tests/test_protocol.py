import json

import pytest
from hypothesis import given, settings, strategies as st

from tools import (FAILING_PACKER, IDENTITY_PACKER, MARKER_MUTATOR, PICKY_PACKER, SCRAMBLE_PACKER,
                   marker_detector)
from subterfuge.detectors import ConstantDetector, DetectorError, FunctionDetector
from subterfuge.occlusion import ByteSource, OcclusionConfig
from subterfuge.pe import Label, RawBinary
from subterfuge.protocol import (BadTemplate, ConfusionCounts, EmptyCorpus, EvasionCurve,
                                 ExternalCommand, Ledger, PackerFailed, PackerMissing, ProtocolError,
                                 Record, WrongLabel, ZeroClass, baseline_eval, baseline_records,
                                 build_report, compute_lift, compute_metrics, derive_seed,
                                 emit_report, evasion_curves, run_benign_mod_experiment,
                                 run_external_mutator_experiment, run_occlusion_experiment,
                                 run_packing_experiment)


def test_metrics_example():
    m = compute_metrics(ConfusionCounts(tp=987, fn=13, tn=921, fp=79))
    assert m.tp_pct == pytest.approx(98.7)
    assert m.tn_pct == pytest.approx(92.1)
    assert m.fn_pct == pytest.approx(1.3)
    assert m.fp_pct == pytest.approx(7.9)
    assert round(m.accuracy_pct, 1) == 95.4


@settings(max_examples=200)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_metric_identities(tp, fn, tn, fp):
    counts = ConfusionCounts(tp=tp, fn=fn, tn=tn, fp=fp)
    if tp + fn == 0 or tn + fp == 0:
        with pytest.raises(ZeroClass):
            compute_metrics(counts)
        return
    m = compute_metrics(counts)
    assert m.tp_pct + m.fn_pct == pytest.approx(100.0)
    assert m.tn_pct + m.fp_pct == pytest.approx(100.0)
    lo, hi = sorted((m.tp_pct, m.tn_pct))
    assert lo - 1e-9 <= m.accuracy_pct <= hi + 1e-9


def test_metrics_empty_class_allowed():
    m = compute_metrics(ConfusionCounts(tp=3, fn=1), allow_empty_class=True)
    assert m.tn_pct is None and m.fp_pct is None and m.accuracy_pct == 75.0
    with pytest.raises(ZeroClass):
        compute_metrics(ConfusionCounts(), allow_empty_class=True)
    with pytest.raises(ValueError):
        compute_metrics(ConfusionCounts(tp=5), n_malicious=4, n_benign=4)
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)


@settings(max_examples=200)
@given(st.floats(0, 100), st.floats(0, 100))
def test_lift_identity(pre, post):
    assert compute_lift(pre, post) == pytest.approx(post - (100 - pre), abs=1e-9)


def test_lift_range_checked():
    with pytest.raises(ValueError):
        compute_lift(101, 5)
    with pytest.raises(ValueError):
        compute_lift(50, -1)


def test_derive_seed_is_stable_and_order_free():
    a = derive_seed(7, "x", "abc")
    assert a == derive_seed(7, "x", "abc")
    assert a != derive_seed(8, "x", "abc") and a != derive_seed(7, "y", "abc")
    assert 0 <= a < 2**64


def test_confusion_from_records_excludes_errors():
    recs = [Record("baseline", "d", "a", "malicious", decision="malicious"),
            Record("baseline", "d", "b", "malicious", decision="benign"),
            Record("baseline", "d", "c", "benign", decision="malicious"),
            Record("baseline", "d", "e", "benign", decision="benign"),
            Record("baseline", "d", "f", "benign", error="boom")]
    c = ConfusionCounts.from_records(recs)
    assert (c.tp, c.fn, c.fp, c.tn) == (1, 1, 1, 1)
    assert c.excluded == ("f",)


def test_record_json_round_trip():
    r = Record("occlusion", "d", "ab", "malicious", mode="undirected", step=2, score=0.25,
               decision="benign", seed=2**63 + 5, extra={"start": 3})
    assert Record.from_json(r.to_json()) == r


def test_baseline_on_synthetic(small_corpus):
    counts = baseline_eval(small_corpus, marker_detector())
    assert (counts.tp, counts.tn, counts.fp, counts.fn) == (40, 40, 0, 0)
    assert compute_metrics(counts).accuracy_pct == 100.0
    with pytest.raises(EmptyCorpus):
        baseline_eval([], marker_detector())


def test_baseline_error_exclusion():
    def score(d):
        if d.startswith(b"bad"):
            raise DetectorError("cannot scan")
        return 1.0

    files = [RawBinary(b"bad1", Label.MALICIOUS), RawBinary(b"ok1", Label.MALICIOUS),
             RawBinary(b"ok2", Label.BENIGN)]
    counts = baseline_eval(files, FunctionDetector(score))
    assert counts.total == 2 and len(counts.excluded) == 1


def test_benign_mod_rejects_benign(small_corpus):
    with pytest.raises(WrongLabel):
        run_benign_mod_experiment(small_corpus, [marker_detector()], max_steps=2)


def test_benign_mod_curves_monotone_and_consistent(small_corpus):
    mal = small_corpus.where(Label.MALICIOUS)
    size_det = FunctionDetector(lambda d: 1.0 if len(d) < 9000 else 0.0, id="size")
    curves, records = run_benign_mod_experiment(mal, [size_det, marker_detector()], max_steps=5,
                                                seed=3, workers=4)
    for c in curves.values():
        assert all(a <= b for a, b in zip(c.evaded_by, c.evaded_by[1:]))
        assert c.tested + c.errors == len(mal)
    assert curves["marker"].evaded == 0 and curves["marker"].survived == 40
    again, records2 = run_benign_mod_experiment(mal, [size_det, marker_detector()], max_steps=5, seed=3)
    assert sorted(r.to_json() for r in records) == sorted(r.to_json() for r in records2)
    assert evasion_curves(records, ["size", "marker"], 5) == curves


def test_chains_share_seed_across_detectors(small_corpus):
    mal = small_corpus.where(Label.MALICIOUS)
    _, records = run_benign_mod_experiment(mal, [ConstantDetector(1.0, id="a"),
                                                 ConstantDetector(0.9, id="b")], max_steps=3, seed=1)
    by = {}
    for r in records:
        by.setdefault((r.sha256, r.step), set()).add(r.post_sha256)
    assert all(len(v) == 1 for v in by.values())


def test_evasion_curve_validation():
    with pytest.raises(ValueError):
        EvasionCurve("d", (0, 2, 1), 0, 0)
    c = EvasionCurve("d", (0, 1, 3), already_fn=2, survived=1)
    assert c.tested == 6 and c.evasion_rate_pct == 75.0


def test_occlusion_experiment_on_marker(small_corpus):
    mal = small_corpus.where(Label.MALICIOUS)
    ben = small_corpus.where(Label.BENIGN).binaries()
    det = marker_detector()
    table, records = run_occlusion_experiment(mal, det, [det], OcclusionConfig(beta=256), seed=2,
                                              benign_pool=ByteSource.benign(ben))
    row = table["marker"]
    assert row["none"].detect_pct == 100.0
    assert row["targeted_random"].detect_pct == 0.0
    assert row["targeted_adversarial"].detect_pct == 0.0
    assert row["undirected"].tested == 40
    with pytest.raises(WrongLabel):
        run_occlusion_experiment(small_corpus, det, [det])


def test_packing_identity_and_scramble(small_corpus):
    det = marker_detector()
    rows, failed, _ = run_packing_experiment(small_corpus, [det], ExternalCommand(IDENTITY_PACKER))
    assert failed == 0
    assert rows[0].columns == (100.0, 100.0, 100.0, 100.0)
    rows, failed, _ = run_packing_experiment(small_corpus, [det], ExternalCommand(SCRAMBLE_PACKER))
    assert rows[0].packed_malware == 0.0 and rows[0].malware == 100.0


def test_packing_failures_are_excluded(small_corpus):
    rows, failed, records = run_packing_experiment(small_corpus, [marker_detector()],
                                                   ExternalCommand(PICKY_PACKER))
    odd = sum(e.size % 2 for e in small_corpus)
    assert failed == odd
    assert sum(1 for r in records if r.error) == odd
    rows, failed, _ = run_packing_experiment(small_corpus, [marker_detector()],
                                             ExternalCommand(FAILING_PACKER))
    assert failed == len(small_corpus) and rows[0].columns == (None, None, None, None)


def test_command_errors(tmp_path):
    with pytest.raises(BadTemplate):
        ExternalCommand(("upx", "{in}"))
    with pytest.raises(BadTemplate):
        ExternalCommand("")
    with pytest.raises(PackerMissing):
        ExternalCommand(("no-such-packer-xyz", "{in}", "{out}")).check_available()
    with pytest.raises(PackerFailed):
        ExternalCommand(FAILING_PACKER).run(b"x", PackerFailed)


def test_mutator_lift(small_corpus):
    ben = small_corpus.where(Label.BENIGN)
    rows, failed, _ = run_external_mutator_experiment(ben, [marker_detector()],
                                                      ExternalCommand(MARKER_MUTATOR))
    assert failed == 0
    assert (rows[0].pre_accuracy_pct, rows[0].post_detect_pct, rows[0].lift) == (100.0, 100.0, 100.0)
    with pytest.raises(WrongLabel):
        run_external_mutator_experiment(small_corpus, [marker_detector()],
                                        ExternalCommand(MARKER_MUTATOR))


def test_ledger_round_trip_and_report_reemission(small_corpus, tmp_path):
    det = marker_detector()
    led = Ledger({"run_id": "r1", "seed": 0, "detectors": ["marker"], "max_steps": 2})
    led.extend(baseline_records(small_corpus.binaries(), [det]))
    _, chain = run_benign_mod_experiment(small_corpus.where(Label.MALICIOUS), [det], max_steps=2)
    led.extend(chain)
    emit_report(led, tmp_path / "a")
    again = Ledger.load(tmp_path / "a" / "ledger.jsonl")
    emit_report(again, tmp_path / "b")
    for name in ("ledger.jsonl", "report.json", "report.md", "curves.csv", "records.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["baseline"]["marker"]["metrics"]["accuracy_pct"] == 100.0
    assert report["benign_mod"]["curves"]["marker"]["survived"] == 40
    assert build_report(again) == report


def test_ledger_load_rejects_garbage(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"technique": "baseline"}\n')
    with pytest.raises(ProtocolError):
        Ledger.load(p)


def test_emit_report_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report(Ledger(), tmp_path, ["pdf"])
