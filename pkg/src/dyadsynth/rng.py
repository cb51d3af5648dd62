"""Named, reproducible random streams.

Every source of randomness in the pipeline (data synthesis, shuffling,
masking, sampling) draws from its own named stream so that changing how
often one consumer draws cannot perturb any other consumer. Streams are
backed by the counter-based Philox generator; the per-stream key is a hash
of (master seed, stream name), so streams are independent and the whole
pipeline is reproducible from a single integer seed.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, name: str) -> int:
    """128-bit Philox key derived from the master seed and stream name."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "little")


def named_stream(seed: int, name: str) -> np.random.Generator:
    """A fresh generator for the given (seed, name) pair."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, name)))


class RngPool:
    """Hands out named streams derived from one master seed.

    Repeated requests for the same name return the *same* generator object,
    so a long-running consumer keeps its position in the stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = named_stream(self.seed, name)
            self._streams[name] = gen
        return gen

    def fresh(self, name: str) -> np.random.Generator:
        """A generator rewound to the start of the named stream."""
        return named_stream(self.seed, name)
