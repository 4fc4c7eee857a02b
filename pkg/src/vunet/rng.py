"""Explicit, serializable random streams.

Every stochastic piece of the package (dropout masks, latent sampling, data
shuffling, synthetic data) draws from an :class:`RngStream` that is passed in
by the caller. There is no hidden global generator.
"""
from __future__ import annotations

import copy

import numpy as np


class RngStream:
    """A seeded PCG64 stream whose full state can be captured and restored.

    PCG64 output is defined bit-for-bit by numpy, so identical seeds and
    identical draw sequences give identical values on every platform.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.PCG64(self.seed)
        self._gen = np.random.Generator(self._bitgen)
        self.draws = 0

    @property
    def position(self) -> int:
        """Number of draw calls made so far."""
        return self.draws

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        self.draws += 1
        return self._gen.standard_normal(shape).astype(dtype, copy=False)

    def uniform(self, shape=None) -> np.ndarray:
        self.draws += 1
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        self.draws += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += 1
        return self._gen.permutation(n)

    def spawn(self, key: int) -> "RngStream":
        """Derive an independent child stream from this one's seed and ``key``."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        return RngStream(int(seq.generate_state(1, dtype=np.uint64)[0]))

    def get_state(self) -> dict:
        state = copy.deepcopy(self._bitgen.state)
        # JSON cannot hold 128-bit ints losslessly as numbers in every reader.
        inner = state["state"]
        inner["state"] = str(inner["state"])
        inner["inc"] = str(inner["inc"])
        return {"seed": str(self.seed), "draws": self.draws, "bit_generator": state}

    def set_state(self, state: dict) -> None:
        bg = copy.deepcopy(state["bit_generator"])
        bg["state"]["state"] = int(bg["state"]["state"])
        bg["state"]["inc"] = int(bg["state"]["inc"])
        self.seed = int(state["seed"])
        self._bitgen.state = bg
        self.draws = int(state["draws"])

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(int(state["seed"]))
        rng.set_state(state)
        return rng

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, draws={self.draws})"
