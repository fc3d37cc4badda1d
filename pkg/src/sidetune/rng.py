"""Deterministic random streams with named, independent substreams.

All randomness in the package flows through :class:`Rng`, a thin wrapper
over numpy's Philox generator. Philox is counter-based and platform
independent, so a seed fully determines every downstream draw. Substreams
are derived by *name* rather than by draw order, which keeps unrelated
consumers (weight init, batch order, fisher sampling, ...) from perturbing
each other: training task 7 draws the same numbers whether or not tasks
1-6 ran first.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ContractError

MAX_SEED = 2**64 - 1


def _name_words(name: str) -> tuple[int, int]:
    """Hash a stream name into two 32-bit words for a SeedSequence spawn key."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return (
        int.from_bytes(digest[:4], "little"),
        int.from_bytes(digest[4:8], "little"),
    )


class Rng:
    """Seeded Philox stream addressable by a path of names."""

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed <= MAX_SEED:
            raise ContractError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._path = _path
        sequence = np.random.SeedSequence(entropy=seed, spawn_key=_path)
        self._gen = np.random.Generator(np.random.Philox(sequence))

    def child(self, name: str) -> "Rng":
        """Derive an independent stream identified by `name`."""
        return Rng(self.seed, self._path + _name_words(name))

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, n: int, size=None) -> np.ndarray:
        """Uniform integers in [0, n)."""
        return self._gen.integers(0, n, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def signs(self, shape) -> np.ndarray:
        """Uniform +-1.0 entries."""
        return np.where(self._gen.random(size=shape) < 0.5, -1.0, 1.0)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self._path})"
