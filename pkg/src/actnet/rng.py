"""Named, counter-based random streams.

A stream is keyed by a tuple of ints and strings, so any consumer (a
dropout layer at step 812, the strong view of unlabeled slot 3) gets the
same draws no matter what else ran before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _word(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be non-negative, got {key}")
        return int(key)
    return zlib.crc32(str(key).encode())


def stream(*keys) -> np.random.Generator:
    """Philox generator keyed by ``keys``."""
    seq = np.random.SeedSequence([_word(k) for k in keys])
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(*keys) -> int:
    """A 63-bit integer seed derived from ``keys``."""
    return int(np.random.SeedSequence([_word(k) for k in keys]).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
