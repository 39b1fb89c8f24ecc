"""Seed derivation and counter-based streams.

All randomness descends from one 64-bit seed. Named sub-seeds come from
``derive_seed(seed, label)`` (BLAKE2b of the seed and label), and each unit
of work (a path block, an environment) draws from a Philox stream whose
128-bit key is ``(unit_index << 64) | sub_seed``.
"""

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(seed: int, label: str) -> int:
    h = hashlib.blake2b(f"{int(seed) & MASK64}:{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, index: int) -> np.random.Generator:
    key = (int(index) << 64) | (int(seed) & MASK64)
    return np.random.Generator(np.random.Philox(key=key))
