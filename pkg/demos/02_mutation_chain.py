"""Random functionality-preserving edits against a brittle detector.

The detector below trusts any file without an overlay. A random chain of PE
edits eventually appends one. Run with ``python3 demos/02_mutation_chain.py``.
"""

# %%
from collections import Counter

import numpy as np

from subterfuge.detectors import FunctionDetector
from subterfuge.mutations import ChainStatus, apply_random_chain, replay_chain
from subterfuge.pe import parse_imports, parse_pe, validate
from subterfuge.synth import CODE, DATA, SectionSpec, build_pe

sample = build_pe([SectionSpec(".text", b"\x31\xc0\xc3" + bytes(700), CODE),
                   SectionSpec(".data", bytes(range(256)) * 3, DATA)],
                  imports={"kernel32.dll": ["ExitProcess"]}, import_section=1,
                  debug=True, debug_section=1, header_slack=800, set_checksum=False).data
pe = parse_pe(sample, strict=True)
print(f"{len(sample)} bytes, sections {[s.display_name for s in pe.sections]}, entry {pe.entry_point_rva:#x}")


def section_end(d):
    return max(s.raw_pointer + s.raw_size for s in parse_pe(bytes(d)).sections)


no_overlay = FunctionDetector(lambda d: 1.0 if len(d) == section_end(d) else 0.0, id="no-overlay")

# %%
# One chain, step by step.
result = apply_random_chain(sample, no_overlay, max_steps=10, rng=3, keep_steps=True)
for k, (rec, score) in enumerate(zip(result.records, result.scores[1:]), start=1):
    print(f"step {k}: {rec.action.variant.value:18s} {rec.action.params}  score={score}")
print("status:", result.status.value)

final = parse_pe(result.final)
print("violations after the chain:", validate(final) or "none")
print("imports now:", [(d.dll, list(d.functions)) for d in parse_imports(final)])

# the recorded seeds reproduce the chain byte for byte
again = replay_chain(sample, [r.rng_seed for r in result.records])
print("replay identical:", again[-1] == result.final)

# %%
# Across many chains, the chance of evading within k steps follows 1 - (6/7)^k
# because one of the seven applicable edits is the one that matters.
runs = [apply_random_chain(sample, no_overlay, max_steps=10, rng=s) for s in range(300)]
first_hit = Counter(r.evaded_at for r in runs if r.status is ChainStatus.EVADED)
cum = np.cumsum([first_hit.get(k, 0) for k in range(1, 11)]) / len(runs)
for k, rate in enumerate(cum, start=1):
    print(f"k={k:2d}  observed {rate:.3f}  expected {1 - (6 / 7) ** k:.3f}")
