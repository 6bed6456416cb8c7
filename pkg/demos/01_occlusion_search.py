"""Where does a detector look?

A toy signature scanner is hidden inside 256 KiB of noise, and the occlusion
search is asked to find the bytes it depends on without ever seeing the
signature itself. Run with ``python3 demos/01_occlusion_search.py``.
"""

# %%
import numpy as np

from subterfuge.detectors import CountingDetector, FunctionDetector
from subterfuge.occlusion import ByteSource, OcclusionConfig, targeted_occlusion_attack

rng = np.random.default_rng(2024)
size = 256 * 1024
data = bytearray(rng.bytes(size))
signature = rng.bytes(64)
offset = int(rng.integers(0, size - 64))
data[offset:offset + 64] = signature
data = bytes(data)
print(f"file: {size} bytes, signature planted at [{offset}, {offset + 64})")

# %%
# The scanner scores by how much of its signature survives. It only flags a
# file when the signature is complete.
ref = np.frombuffer(signature, dtype=np.uint8)


def intact(d):
    window = np.frombuffer(bytes(d[offset:offset + 64]), dtype=np.uint8)
    return float(np.mean(window == ref))


scanner = CountingDetector(FunctionDetector(intact, id="signature", threshold=1.0))
print("baseline decision:", scanner.scan(data).decision.value)

# %%
# Each level occludes both halves of the current range with random bytes and
# keeps the half whose occlusion lowered the score more.
cfg = OcclusionConfig(beta=2048, source=ByteSource.random(7))
occluded, outcome = targeted_occlusion_attack(data, scanner, cfg)

for depth, lv in enumerate(outcome.trace):
    print(f"level {depth:2d}: [{lv.start:6d}, {lv.end:6d})  left={lv.left_score:.3f} "
          f"right={lv.right_score:.3f} -> {lv.choice}")

print(f"\nwindow [{outcome.start}, {outcome.end}), {outcome.length} bytes")
print(f"search calls: {outcome.calls} (log2({size}/2048) = {int(np.log2(size / 2048))} levels, two calls each)")
print(f"score after occluding the window: {outcome.occluded_score:.3f}, evaded: {outcome.evaded}")
print(f"total scans including baseline and final check: {scanner.calls}")
