"""Derive independent, stable sub-seeds from one run seed."""

import hashlib

import numpy as np


def derive_seed(seed: int, *keys) -> int:
    """Hash ``(seed, *keys)`` into a 63-bit integer.

    Stable across processes and Python versions (no reliance on ``hash()``).
    """
    text = "/".join([str(int(seed))] + [str(k) for k in keys])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))
