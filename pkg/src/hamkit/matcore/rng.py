"""Seeded randomness. Every random draw in the package goes through here."""
from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "PCG64"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *labels) -> int:
    """Stable 63-bit child seed for a named component, e.g. ``derive_seed(5, "data", "val")``."""
    text = ":".join([str(int(seed))] + [str(x) for x in labels])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
