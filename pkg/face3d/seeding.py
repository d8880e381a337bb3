"""Seed derivation so that parallel jobs never depend on scheduling order."""

import hashlib

import numpy as np


def derive_seed(master_seed: int, key) -> int:
    """Stable 31-bit seed from (master_seed, key) via SHA-256"""
    digest = hashlib.sha256(f"{int(master_seed)}:{key}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & 0x7FFFFFFF


def derive_rng(master_seed: int, key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, key))
