"""Deterministic fan-out of one experiment seed into purpose-named streams.

Every stochastic stage derives its generator as substream(seed, "purpose",
...), so two runs with the same top-level seed consume identical random
streams regardless of which stages run or in what order. Tags are hashed
with sha256, not python hash(), so the mapping is stable across processes.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed: int, *tags) -> np.random.Generator:
    """Independent generator for (seed, tags). Same args, same stream."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_tag_to_int(t) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *tags) -> int:
    """Integer sub-seed for components that take a seed, not a generator."""
    return int(substream(seed, *tags).integers(0, 2**31))
