"""Reproducible random streams built on numpy's counter-based Philox generator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALGORITHM = "philox4x64"
DEFAULT_SEED = 20230806


@dataclass(frozen=True)
class Rng:
    """A named random stream.

    The pair ``(seed, stream)`` fully determines the draw sequence. ``stream``
    is a tuple path so that independent sub-streams (one per trial, one per
    resample block, ...) can be derived without coordination between workers.
    """

    seed: int = DEFAULT_SEED
    stream: tuple[int, ...] = ()

    algorithm = ALGORITHM

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        object.__setattr__(self, "stream", tuple(int(s) for s in self.stream))

    def child(self, *index: int) -> Rng:
        return Rng(self.seed, self.stream + tuple(index))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(seq))


def as_rng(value: Rng | int | None) -> Rng:
    if value is None:
        return Rng()
    if isinstance(value, Rng):
        return value
    return Rng(int(value))
