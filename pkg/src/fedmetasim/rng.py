"""Deterministic random substreams derived from one root seed.

Streams are keyed by (purpose, indices...) through a keyed hash into a
counter-based Philox generator. Any stream can be reconstructed without
drawing from any other stream, so per-client work keeps identical results
whether clients are simulated sequentially or in parallel.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def substream(root_seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Return the generator uniquely identified by (root_seed, purpose, indices)."""
    h = hashlib.blake2b(digest_size=16)
    h.update(struct.pack("<q", int(root_seed)))
    h.update(purpose.encode("utf-8"))
    for index in indices:
        h.update(struct.pack("<q", int(index)))
    key = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


class StreamFactory:
    """Hands out named substreams for one root seed."""

    def __init__(self, root_seed: int):
        self.root_seed = int(root_seed)

    def stream(self, purpose: str, *indices: int) -> np.random.Generator:
        return substream(self.root_seed, purpose, *indices)
