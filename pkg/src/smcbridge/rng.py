"""Deterministic derivation of named random streams.

Every stochastic routine in this package takes an explicit
``numpy.random.Generator``; nothing touches global RNG state.  The helpers
here turn a master seed plus a tuple of labels (experiment cell coordinates,
replicate ids, stream names) into independent, reproducible streams: the
same inputs always yield the same stream, on any platform, regardless of
execution order.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def derive_seedseq(master_seed: int, *parts) -> np.random.SeedSequence:
    """SeedSequence that is a pure function of (master_seed, *parts).

    Parts may be strings, ints, floats, or tuples of those; they are folded
    into the entropy through a SHA-256 digest of their reprs.
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    words = np.frombuffer(h.digest(), dtype=np.uint32)
    entropy = [int(master_seed) & _MASK64] + [int(w) for w in words[:6]]
    return np.random.SeedSequence(entropy)


def derive_rng(master_seed: int, *parts) -> np.random.Generator:
    """Independent PCG64 stream named by (master_seed, *parts)."""
    return np.random.default_rng(derive_seedseq(master_seed, *parts))


def stream_fingerprint(master_seed: int, *parts) -> str:
    """Short stable hex tag naming a derived stream, for result records."""
    h = hashlib.sha256()
    h.update(repr(int(master_seed)).encode())
    h.update(b"\x1f")
    for part in parts:
        h.update(repr(part).encode())
        h.update(b"\x1f")
    return h.hexdigest()[:12]
