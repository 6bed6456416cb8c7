import hashlib
import itertools

import numpy as np
import pytest

from subterfuge.corpus import (FILLER_CHUNKS, MARKER, Corpus, CorpusError, DegenerateFraction,
                               LabelConflict, ManifestEntry, ManifestError, MissingRoot,
                               NotEnoughFiles, Split, generate_synthetic_corpus, ingest,
                               label_vector, merge, read_manifest, sample, split, synthetic_pe,
                               write_manifest)
from subterfuge.pe import Label, parse_pe, serialize


def _tree(tmp_path, benign, malicious):
    for label, blobs in (("benign", benign), ("malicious", malicious)):
        d = tmp_path / label
        d.mkdir(parents=True, exist_ok=True)
        for i, blob in enumerate(blobs):
            (d / f"{i}.bin").write_bytes(blob)
    return tmp_path


def test_marker_never_spans_pooled_chunks():
    for a, b in itertools.product(FILLER_CHUNKS, repeat=2):
        assert MARKER not in a + b


def test_synthetic_files_are_valid_and_labelled(small_corpus):
    assert small_corpus.synthetic
    assert small_corpus.counts() == {"benign": 40, "malicious": 40}
    for e in small_corpus:
        data = small_corpus.load(e).data
        pe = parse_pe(data, strict=True)
        assert serialize(pe) == data
        assert (MARKER in data) == (e.label is Label.MALICIOUS)
        assert hashlib.sha256(data).hexdigest() == e.sha256


def test_synthetic_generation_is_deterministic(tmp_path):
    a = generate_synthetic_corpus(5, 9, tmp_path / "a")
    b = generate_synthetic_corpus(5, 9, tmp_path / "b")
    c = generate_synthetic_corpus(5, 10, tmp_path / "c")
    assert a.digest == b.digest != c.digest
    assert (tmp_path / "a" / "SYNTHETIC").exists()


def test_synthetic_pe_marker_switch():
    rng = np.random.default_rng(0)
    assert MARKER in synthetic_pe(rng, True)
    assert MARKER not in synthetic_pe(rng, False)


def test_ingest_tree_and_manifest_round_trip(tmp_path):
    root = _tree(tmp_path, [b"MZ1", b"MZ2", b"MZ2"], [b"MZ3"])
    c = ingest(root)
    assert len(c) == 3 and c.counts() == {"benign": 2, "malicious": 1}
    assert not c.synthetic
    write_manifest(c, root / "m.csv")
    back = ingest(root / "m.csv")
    assert back.digest == c.digest
    assert {e.sha256 for e in back} == {e.sha256 for e in c}


def test_ingest_errors(tmp_path):
    with pytest.raises(MissingRoot):
        ingest(tmp_path / "nowhere")
    root = _tree(tmp_path, [b"same"], [b"same"])
    with pytest.raises(LabelConflict):
        ingest(root)
    assert len(ingest(root, on_conflict="drop")) == 0


def test_manifest_errors(tmp_path):
    with pytest.raises(MissingRoot):
        read_manifest(tmp_path / "none.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n")
    with pytest.raises(ManifestError):
        read_manifest(bad)
    bad.write_text('"path","label","sha256","size","split"\n"ghost.bin","benign","00",1,"train"\n')
    with pytest.raises(ManifestError):
        read_manifest(bad)
    (tmp_path / "f.bin").write_bytes(b"x")
    bad.write_text('"path","label","sha256","size","split"\n"f.bin","weird","00",1,"train"\n')
    with pytest.raises(ManifestError):
        read_manifest(bad)


def test_corpus_rejects_duplicates_and_detects_changes(tmp_path):
    e = ManifestEntry("x", Label.BENIGN, "ab", 1)
    with pytest.raises(CorpusError):
        Corpus([e, e])
    root = _tree(tmp_path, [b"MZa"], [b"MZb"])
    c = ingest(root)
    (root / "benign" / "0.bin").write_bytes(b"changed")
    with pytest.raises(CorpusError):
        c.binaries()


def test_split_is_stratified_disjoint_and_seeded(small_corpus):
    train, test = split(small_corpus, 0.25, 1)
    assert test.counts() == {"benign": 10, "malicious": 10}
    assert {e.sha256 for e in train}.isdisjoint(e.sha256 for e in test)
    assert all(e.split is Split.TEST for e in test)
    assert all(e.split is Split.TRAIN for e in train)
    assert split(small_corpus, 0.25, 1)[1].digest == test.digest
    assert split(small_corpus, 0.25, 2)[1].digest != test.digest
    assert merge(train, test).digest == small_corpus.digest
    with pytest.raises(DegenerateFraction):
        split(small_corpus, 1.0, 0)


def test_sample(small_corpus):
    s = sample(small_corpus, 7, 3, Label.MALICIOUS)
    assert len(s) == 7 and all(e.label is Label.MALICIOUS for e in s)
    assert sample(small_corpus, 7, 3, Label.MALICIOUS).digest == s.digest
    with pytest.raises(NotEnoughFiles):
        sample(small_corpus, 81, 0)


def test_label_vector(small_split):
    train, _ = small_split
    y = label_vector(train)
    assert y.sum() == 30 and len(y) == 60
