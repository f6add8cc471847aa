"""Deterministic seed derivation.

Sub-seeds are hashes of (seed, *tags), so sampling one node never depends on
iteration order or on how many other nodes were sampled first.
"""

import hashlib

import numpy as np


def sub_seed(*parts) -> int:
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def generator(*parts) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(sub_seed(*parts)))
