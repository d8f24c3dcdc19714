"""
DiffKnock — RNG por propósito
Un único seed maestro por ejecución; cada subsistema deriva su propio stream
Philox (contador) a partir de (seed, propósito, índices).
"""

from __future__ import annotations

import hashlib
from typing import Union

import numpy as np

Key = Union[int, str]


def _key_to_int(key: Key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"clave de stream negativa: {key}")
        return int(key)
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_seed_sequence(seed: int, *keys: Key) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_rng(seed: int, *keys: Key) -> np.random.Generator:
    """Generator Philox independiente para (seed, *keys)."""
    return np.random.Generator(np.random.Philox(derive_seed_sequence(seed, *keys)))


def derive_int_seed(seed: int, *keys: Key) -> int:
    """Seed entero de 63 bits, útil para guardar en manifiestos y checkpoints."""
    state = derive_seed_sequence(seed, *keys).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
