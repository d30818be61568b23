"""Named random sub-streams.

Every random draw in the package descends from one integer seed. A child
stream is addressed by a name path and its seed is

    child_seed = hash64(parent_seed, name)

where ``hash64`` is the first 8 bytes (little endian) of BLAKE2b over the
parent seed's 8-byte little-endian encoding followed by the UTF-8 name.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def hash64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def child_seed(parent: int, name: str | int) -> int:
    payload = (int(parent) & MASK64).to_bytes(8, "little") + str(name).encode("utf-8")
    return hash64(payload)


def derive(seed: int, *path: str | int) -> int:
    """Walk a name path from ``seed``; ``derive(s, "a", 3)`` == child(child(s, "a"), 3)."""
    s = int(seed) & MASK64
    for name in path:
        s = child_seed(s, name)
    return s


def stream(seed: int, *path: str | int) -> np.random.Generator:
    return np.random.default_rng(derive(seed, *path))
