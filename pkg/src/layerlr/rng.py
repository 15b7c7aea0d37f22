"""Deterministic random streams.

Every stochastic choice in the library (weight init, epoch shuffles,
synthetic data) draws from Philox4x64, a counter-based generator keyed
explicitly by (seed, salt). Streams are therefore pure functions of their
key and independent of draw order elsewhere in the process.
"""

import numpy as np

# Salts keep independent purposes on disjoint Philox keys.
SALT_INIT = 0x1A71
SALT_SHUFFLE = 0x5AFF
SALT_BLOBS = 0xB10B


def generator(seed: int, salt: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, salt)."""
    key = np.array([np.uint64(seed), np.uint64(salt)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
