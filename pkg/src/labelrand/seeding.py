"""Deterministic randomness keyed by (seed, purpose, example id).

Randomizing a label must not depend on the row order of the input, so the
uniform variate used for each example is derived from a hash of its id
rather than from a shared sequential stream.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

_TWO_POW_53 = float(1 << 53)


def _digest(seed: int, purpose: str, key: object) -> bytes:
    payload = f"{int(seed)}\x1f{purpose}\x1f{key}".encode("utf-8")
    return hashlib.blake2b(payload, digest_size=16).digest()


def keyed_uniform(seed: int, purpose: str, key: object) -> float:
    """Returns a uniform float in [0, 1) determined by (seed, purpose, key)."""
    (word,) = struct.unpack("<Q", _digest(seed, purpose, key)[:8])
    return (word >> 11) / _TWO_POW_53


def keyed_rng(seed: int, purpose: str, key: object = "") -> np.random.Generator:
    """Returns an independent numpy generator for (seed, purpose, key)."""
    words = struct.unpack("<4I", _digest(seed, purpose, key))
    return np.random.default_rng(np.random.SeedSequence(list(words)))
