"""Seeded random streams for reproducible Monte Carlo.

Every consumer draws from a generator keyed by ``(label, index)`` under one root seed.
Keys are folded into the ``spawn_key`` of a :class:`numpy.random.SeedSequence`, so the
stream of replica 7 of ``"apply_U"`` is the same whether 10 or 10,000 replicas run and
whichever worker process evaluates it.
"""
import zlib

import numpy as np


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


class StreamFactory:
    def __init__(self, seed: int):
        self._seed = int(seed)

    def stream(self, label: str, index: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(self._seed, spawn_key=(label_key(label), int(index)))
        return np.random.default_rng(seq)
