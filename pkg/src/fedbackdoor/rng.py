"""Deterministic random streams.

Every stream is a Philox4x64-10 counter-based generator (numpy's
``np.random.Philox``). The 128-bit key is ``(master_seed, crc32(purpose))``
and the 256-bit starting counter is ``(0, a, b, c)``: word 0 is left free for
numpy's per-draw increments and words 1..3 carry the caller's integer path
(typically ``round, client_id, extra``). Streams with distinct paths therefore
never overlap, and results do not depend on the order in which streams are
created, which is what makes runs reproducible at any worker count.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(master_seed: int, purpose: str, *path: int) -> np.random.Generator:
    """Return an independent generator for ``(master_seed, purpose, path)``.

    ``path`` holds at most three non-negative integers.
    """
    if len(path) > 3:
        raise ValueError("stream path holds at most three integers")
    words = [0, 0, 0, 0]
    for i, p in enumerate(path):
        if p < 0:
            raise ValueError("stream path entries must be non-negative")
        words[i + 1] = int(p) & _MASK64
    key = np.array([int(master_seed) & _MASK64, purpose_code(purpose)], dtype=np.uint64)
    bitgen = np.random.Philox(key=key, counter=np.array(words, dtype=np.uint64))
    return np.random.Generator(bitgen)


def derive_seed(master_seed: int, purpose: str, *path: int) -> int:
    """A 63-bit integer seed drawn from :func:`stream`, for APIs that want an int."""
    return int(stream(master_seed, purpose, *path).integers(0, 2**63 - 1))
