import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from subterfuge.corpus import generate_synthetic_corpus, split  # noqa: E402
from subterfuge.synth import CODE, DATA, RDATA, SectionSpec, build_pe  # noqa: E402


def rich_pe(rng: np.random.Generator, *, certificate=True, debug=True, checksum=True,
            pe32plus=None, header_slack=None) -> bytes:
    """A PE carrying everything the mutations touch: imports, debug data, a
    certificate, executable slack and a non-zero checksum."""
    nsec = int(rng.integers(1, 4))
    chars = [CODE, RDATA, DATA]
    specs = []
    for i in range(nsec):
        body = rng.bytes(int(rng.integers(64, 3000)))
        specs.append(SectionSpec([".text", ".rdata", ".data"][i], body, chars[i]))
    return build_pe(
        specs,
        entry=(0, int(rng.integers(0, 16))),
        imports={"kernel32.dll": ["ExitProcess", "Sleep"], "user32.dll": ["MessageBoxA"]},
        import_section=int(rng.integers(nsec)),
        debug=debug,
        debug_section=int(rng.integers(nsec)),
        certificate=rng.bytes(int(rng.integers(16, 300))) if certificate else None,
        overlay=rng.bytes(int(rng.integers(0, 200))),
        pe32plus=bool(rng.integers(2)) if pe32plus is None else pe32plus,
        header_slack=int(rng.integers(80, 600)) if header_slack is None else header_slack,
        set_checksum=checksum,
    ).data


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic_corpus(40, 5, root)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return split(small_corpus, 0.25, 5)
