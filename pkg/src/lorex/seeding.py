"""Deterministic seed derivation.

All randomness in the package flows from one master seed. Each consumer
derives its own stream from (master, *tags) so that any stage can be rerun
in isolation and reproduce bit-identical results, independent of what other
stages did with their streams.
"""

import hashlib

import numpy as np


def derive_seed(master: int, *tags) -> int:
    """Map (master, tags...) to a stable 64-bit seed via blake2b."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    return int.from_bytes(h.digest(), "little")


def stream(master: int, *tags) -> np.random.Generator:
    """Independent PCG64 generator for one purpose."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *tags)))
