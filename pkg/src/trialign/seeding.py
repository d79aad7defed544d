"""Deterministic RNG derivation.

Every stochastic operation in the package draws from a generator derived
from (seed, *tags) so that any step of any pipeline is a pure function of
its seed. This is what makes checkpoint-resume bitwise reproducible: no
RNG state has to survive a restart, it is re-derived from the step index.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Return a fresh Generator keyed by seed and a tuple of hashable tags.

    Tags are serialized to text, so ("aug", 3) and ("aug", "3") collide;
    callers keep tag types consistent.
    """
    key = "/".join(str(t) for t in tags)
    digest = hashlib.sha256(f"{seed}/{key}".encode()).digest()
    words = np.frombuffer(digest[:16], dtype=np.uint32)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words.tolist())))


def derive_int(seed: int, *tags, bits: int = 31) -> int:
    """Stable integer in [0, 2**bits), for seeding torch."""
    key = "/".join(str(t) for t in tags)
    digest = hashlib.sha256(f"{seed}/{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (1 << bits)
