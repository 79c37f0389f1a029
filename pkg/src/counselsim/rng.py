"""Deterministic seed derivation.

Every random decision in the pipeline draws from an RNG derived here.
Derivation hashes the parts with SHA-256 instead of Python's built-in
``hash`` so results are stable across processes (str hashing is salted
per interpreter run, which would break byte-identical re-runs).
"""

from __future__ import annotations

import hashlib
import random


def derive_int(*parts: object) -> int:
    """Collapse an ordered part list into a stable 64-bit seed."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(*parts: object) -> random.Random:
    """Fresh ``random.Random`` seeded from the part list."""
    return random.Random(derive_int(*parts))
