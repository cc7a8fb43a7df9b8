"""Counter-based random streams.

Every stochastic routine in the package takes an explicit 64-bit seed (or a
generator built from one); nothing reads global RNG state. Streams for
sub-tasks (per trial, per grid cell, ...) are derived from (seed, tags) so
that concurrent jobs stay reproducible and order-independent.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1
_MIX = 0x9E3779B97F4A7C15


def _tag64(tag) -> int:
    """Map an int or string tag to a stable 64-bit value."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.blake2b(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_key(seed: int, *tags) -> tuple[int, int]:
    """Philox key for the stream identified by (seed, tags)."""
    sub = 0
    for tag in tags:
        sub = (sub * _MIX + _tag64(tag) + 1) & _MASK64
    return _tag64(seed), sub


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Philox generator for the stream identified by (seed, tags)."""
    key = stream_key(seed, *tags)
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))
