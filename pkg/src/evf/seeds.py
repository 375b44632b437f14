"""Deterministic, splittable random keys.

Every random draw in the library descends from one integer seed through an
explicit derivation path, so identical (inputs, seed) pairs give identical
results regardless of how many unrelated draws happened elsewhere. A key never
mutates; `child` returns a new key with the path extended.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RngKey:
    """An immutable handle into a seeded random tree."""

    entropy: int
    path: tuple[int, ...] = ()

    def child(self, *steps: int) -> "RngKey":
        return RngKey(self.entropy, self.path + tuple(int(s) for s in steps))

    def generator(self) -> np.random.Generator:
        """A fresh generator for this key; repeated calls restart the stream."""
        seq = np.random.SeedSequence(self.entropy, spawn_key=self.path)
        return np.random.default_rng(seq)
