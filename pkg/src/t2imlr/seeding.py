"""Deterministic seed derivation.

Every random draw in the pipeline descends from one unsigned 64-bit master
seed. Components derive their own streams by hashing the master seed with a
component label, so adding a consumer never shifts another component's stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def split_seed(master: int, label: str) -> int:
    """Derive a child seed from `master` for the component named `label`."""
    h = hashlib.blake2b(digest_size=8)
    h.update((master & _MASK64).to_bytes(8, "little"))
    h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def rng_for(master: int, label: str) -> np.random.Generator:
    """A PCG64 generator seeded from `split_seed(master, label)`."""
    return np.random.Generator(np.random.PCG64(split_seed(master, label)))


def word_rng(seed: int, word: str) -> np.random.Generator:
    """A generator keyed by (seed, word); identical word gives identical stream."""
    h = hashlib.blake2b(digest_size=16)
    h.update((seed & _MASK64).to_bytes(8, "little"))
    h.update(word.encode("utf-8"))
    lo = int.from_bytes(h.digest()[:8], "little")
    hi = int.from_bytes(h.digest()[8:], "little")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([lo, hi])))
