"""
Stream splitting: every named random stream of a run derives from one 64-bit
seed through SeedSequence([seed, crc32(name)]), so each sub-component is
reproducible on its own and independent of the order streams are requested.
"""

import zlib
from typing import Dict

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode('utf-8'))


class SeedStreams:
    def __init__(self, seed: int):
        if not 0 <= seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._cache: Dict[str, np.random.Generator] = {}

    def sequence(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.seed, stream_key(name)])

    def generator(self, name: str) -> np.random.Generator:
        """Shared generator for a stream (created on first use)"""
        if name not in self._cache:
            self._cache[name] = np.random.default_rng(self.sequence(name))
        return self._cache[name]

    def fresh(self, name: str) -> np.random.Generator:
        """New generator at the start of a stream, independent of earlier draws"""
        return np.random.default_rng(self.sequence(name))

    def child_seed(self, name: str) -> int:
        return int(self.sequence(name).generate_state(1, dtype=np.uint32)[0])
