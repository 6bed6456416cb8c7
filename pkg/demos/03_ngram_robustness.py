"""Train a byte n-gram model, then attack it three ways.

Uses a small synthetic corpus (no real malware) whose malicious half carries
a fixed marker. Run with ``python3 demos/03_ngram_robustness.py``.
"""

# %%
import sys
import tempfile
from pathlib import Path

from subterfuge.corpus import Split, generate_synthetic_corpus, label_vector, split
from subterfuge.detectors import NGramDetector
from subterfuge.ngram import TrainParams, save_model, train
from subterfuge.occlusion import OcclusionConfig
from subterfuge.pe import Label
from subterfuge.protocol import (ExternalCommand, baseline_eval, compute_metrics, run_benign_mod_experiment,
                                 run_occlusion_experiment, run_packing_experiment)

work = Path(tempfile.mkdtemp(prefix="subterfuge-demo-"))
corpus = generate_synthetic_corpus(150, 0, work / "corpus")
tr, te = split(corpus, 0.2, 0)
print("train", tr.counts(), "test", te.counts())

# %%
model = train([tr.load(e).data for e in tr], label_vector(tr), TrainParams(num_buckets=1 << 18, epochs=5))
save_model(model, work / "ngram.model")
det = NGramDetector.from_path(work / "ngram.model", id="ngram")
m = compute_metrics(baseline_eval(te, det))
print(f"held out: TP {m.tp_pct:.1f}%  TN {m.tn_pct:.1f}%  accuracy {m.accuracy_pct:.1f}%")

# %%
# Random PE edits on the held-out malicious files.
mal = te.where(Label.MALICIOUS)
curves, _ = run_benign_mod_experiment(mal, [det], max_steps=10, seed=1)
c = curves["ngram"]
print("evaded after k edits:", list(c.evaded_by), f"of {c.tested}")

# %%
# Occlusion: targeted search against the model itself, versus a random window.
table, _ = run_occlusion_experiment(mal, det, [det], OcclusionConfig(beta=512), seed=1)
for mode, row in table["ngram"].items():
    print(f"{mode:22s} detected {row.detect_pct:5.1f}%")

# %%
# A stand-in "packer" that XORs every byte. Real packers plug in the same way
# through a command template with {in} and {out}.
xor = ExternalCommand((sys.executable, "-c",
                       "import sys; d = open(sys.argv[1], 'rb').read(); "
                       "open(sys.argv[2], 'wb').write(bytes(b ^ 0x5A for b in d))", "{in}", "{out}"))
rows, failed, _ = run_packing_experiment(te.where(split=Split.TEST), [det], xor)
r = rows[0]
print(f"benign {r.benign:.1f}% -> packed {r.packed_benign:.1f}%   "
      f"malware {r.malware:.1f}% -> packed {r.packed_malware:.1f}%")
print("artifacts in", work)
