"""Counter-based random streams keyed by (seed, site name, step).

Each stream is an independent Philox generator whose key is a hash of the
triple, so sites never share state and any stream can be regenerated without
replaying the others.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, site: str, step: int) -> int:
    digest = hashlib.blake2b(f"{seed}\x1f{site}\x1f{step}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed: int, site: str, step: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, site, step)))


class RngTree:
    """Convenience wrapper holding a global seed and handing out named streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def __call__(self, site: str, step: int = 0) -> np.random.Generator:
        return stream(self.seed, site, step)

    def child(self, site: str) -> "RngTree":
        return RngTree(_key(self.seed, site, 0) % (2**63))
