"""Deterministic random streams.

Every stream is a Philox (counter-based) generator keyed by a path such as
``(seed, "bootstrap", 17)``. String components are mapped to integers with
CRC-32, so the same path always yields the same stream on every host and the
stream for one task never depends on how many other tasks ran before it.
"""

from __future__ import annotations

import zlib

import numpy as np


def _encode(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise ValueError("stream path components must be non-negative")
    return value


def stream(seed: int, *path) -> np.random.Generator:
    ss = np.random.SeedSequence([_encode(seed)] + [_encode(p) for p in path])
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, dtype=np.uint64)))


def derive_seed(seed: int, *path) -> int:
    """A 63-bit integer seed for a child task, stable across hosts."""
    ss = np.random.SeedSequence([_encode(seed)] + [_encode(p) for p in path])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
