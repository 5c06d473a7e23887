"""Deterministic seed derivation.

Stream seeds are derived by hashing (base seed, label) with sha256, so
they are stable across processes and platforms (unlike hash() of strings).
"""

import hashlib
from random import Random


def derive_seed(base: int, label: str) -> int:
    digest = hashlib.sha256(f"{base}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def spawn(base: int, label: str) -> Random:
    return Random(derive_seed(base, label))
