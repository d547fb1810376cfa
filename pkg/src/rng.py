"""
Seeded random streams.

Every stream is a numpy ``Philox`` counter-based generator keyed by a
``SeedSequence``. Task seeds are derived from the master seed by numpy's
spawn-key hashing, so any task can be rebuilt from (master seed, task keys)
alone regardless of which worker ran it.
"""

import hashlib
from typing import Union

import numpy as np

RNG_ALGORITHM = "numpy-Philox4x64/SeedSequence-v1"

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, str):
        # Stable across processes, unlike hash()
        return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    return int(key)


def derive_seed(master_seed: int, *keys: Key) -> int:
    """Derive a 64-bit task seed from the master seed and task keys"""
    sequence = np.random.SeedSequence(
        int(master_seed), spawn_key=tuple(_key_to_int(k) for k in keys)
    )
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def make_generator(seed: int) -> np.random.Generator:
    """Generator for a 64-bit seed"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
