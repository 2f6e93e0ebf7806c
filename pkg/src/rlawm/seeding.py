"""Deterministic seed derivation. No module touches global RNG state."""

import hashlib

import numpy as np
import torch

_MASK63 = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Map a tuple of labels/ints to a stable 63-bit seed.

    Uses blake2b so the mapping is identical across processes and platforms
    (unlike Python's salted hash()).
    """
    key = "/".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") & _MASK63


def torch_gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def np_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))
