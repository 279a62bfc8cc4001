"""Named random sub-streams derived from one global seed.

Every consumer keys its generator by ``(seed, stream, *keys)`` so that,
for example, phantom generation and sampling never share draws even when
given the same seed and image index.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"phantom": 1, "training": 2, "sampling": 3, "scorer": 4}


def seed_sequence(seed: int, stream: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), STREAMS[stream], *(int(k) for k in keys)])


def generator(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator for one named stream."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, stream, *keys)))
