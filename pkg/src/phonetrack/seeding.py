"""Named seed derivation so every stage draws from one top-level seed."""
from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(root: int, *names) -> int:
    """Stable 63-bit seed from a root seed and a path of names/indices."""
    key = "/".join([str(int(root))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


def rng_for(root: int, *names) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *names))
