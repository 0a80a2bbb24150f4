"""Counter-based random streams.

Stochastic merges draw one uniform per tensor element, addressed by
``(stream seed, tensor name, flat index)``. The value at a coordinate does
not depend on which thread computes it or in what order tensors are
visited. The generator is the SplitMix64 finalizer applied to a Weyl
sequence, evaluated at an arbitrary counter instead of iterated.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import kernels

MASK64 = (1 << 64) - 1


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def _digest64(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "big")


def stream_seed(base_seed: int, specialist_id: str | None = None, index: int | None = None,
                policy: str = "by_name") -> int:
    """Seed for one task vector's stream.

    ``by_name`` hashes the base seed with the specialist id, so the stream
    follows the vector regardless of its position in the input list.
    ``by_index`` is base seed plus list position, which is order dependent.
    """
    if policy == "by_name":
        if specialist_id is None:
            raise ValueError("by_name seed policy needs a specialist_id")
        return _digest64(f"{int(base_seed)}\x00{specialist_id}".encode())
    if policy == "by_index":
        if index is None:
            raise ValueError("by_index seed policy needs an index")
        return (int(base_seed) + int(index)) & MASK64
    raise ValueError(f"unknown seed policy {policy!r}")


def tensor_key(seed: int, name: str) -> int:
    """Kernel key for the stream ``seed`` restricted to tensor ``name``."""
    return mix64((seed & MASK64) ^ mix64(_digest64(name.encode("utf-8"))))


def uniforms(seed: int, name: str, n: int, start: int = 0) -> np.ndarray:
    return kernels.uniform_block(tensor_key(seed, name), start, n)


def numpy_generator(seed: int, *words: int | str) -> np.random.Generator:
    """Independent numpy Generator keyed by ``seed`` and extra words.

    Strings are hashed to 64-bit integers, so a tensor name or chunk index
    can name a stream directly.
    """
    entropy = [int(seed) & MASK64]
    for w in words:
        entropy.append(_digest64(w.encode("utf-8")) if isinstance(w, str) else int(w) & MASK64)
    return np.random.default_rng(np.random.SeedSequence(entropy))
