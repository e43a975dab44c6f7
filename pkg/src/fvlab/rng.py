"""Reproducible random streams.

Every replication owns its own generator, derived from a 64-bit master seed
and the replication index through numpy's ``SeedSequence`` spawn tree::

    stream(seed, i) = Generator(PCG64(SeedSequence(seed, spawn_key=(i,))))

Streams therefore do not depend on how replications are scheduled across
threads.
"""
from __future__ import annotations

import numpy as np

STREAM_DERIVATION = "Generator(PCG64(SeedSequence(entropy=seed, spawn_key=(replication_index,))))"


def stream(seed: int, index: int) -> np.random.Generator:
    """Return the generator of replication ``index`` under master ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class UniformStream:
    """Sequential reader of ``next_double`` draws with read-ahead buffering.

    Produces exactly the sequence the compiled kernels obtain by calling the
    bit generator's ``next_double`` one value at a time. Call :meth:`close`
    when done; unused read-ahead values are given back to PCG64-family
    generators so the generator ends in the same state as after the
    compiled path.
    """

    __slots__ = ("_rng", "_buf", "_pos", "_chunk")

    def __init__(self, rng: np.random.Generator, chunk: int = 64):
        self._rng = rng
        self._buf: list[float] = []
        self._pos = 0
        self._chunk = chunk

    def next(self) -> float:
        if self._pos == len(self._buf):
            self._buf = self._rng.random(self._chunk).tolist()
            self._pos = 0
            if self._chunk < 8192:
                self._chunk *= 2
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def close(self) -> None:
        unused = len(self._buf) - self._pos
        self._buf, self._pos = [], 0
        if unused:
            bitgen = self._rng.bit_generator
            if hasattr(bitgen, "advance"):
                bitgen.advance(-unused)
