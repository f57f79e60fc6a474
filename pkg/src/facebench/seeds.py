"""Deterministic seed derivation for independent per-unit random streams.

Child streams are derived by hashing the parent seed together with string
labels, so results never depend on the order units are processed in.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, *labels: str) -> int:
    """Derive a 64-bit child seed from a parent seed and a label path."""
    key = str(int(seed)) + "".join("/" + label for label in labels)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *labels: str) -> np.random.Generator:
    """Generator seeded by ``derive_seed(seed, *labels)``."""
    return np.random.default_rng(derive_seed(seed, *labels))
