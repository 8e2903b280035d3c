"""Seeded, splittable random streams on top of numpy's counter-based Philox."""

from __future__ import annotations

import zlib

import numpy as np

UNIFORM_EPS = 1e-12


def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"rng keys must be non-negative, got {part}")
    return int(part)


class Rng:
    """A reproducible random stream identified by ``(seed, path)``.

    ``child`` derives an independent stream from a key path without
    consuming anything from the parent, so a sub-stream such as
    ``rng.child("train", step)`` is the same no matter what was drawn
    before it. That property is what makes resumed training bit-exact.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, *self.path]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *keys: int | str) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key(k) for k in keys))

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform(0, 1) samples clamped to ``[1e-12, 1 - 1e-12]``."""
        u = self._gen.random(shape)
        return np.clip(u, UNIFORM_EPS, 1.0 - UNIFORM_EPS)

    def gumbel(self, shape=()) -> np.ndarray:
        u = np.clip(self.uniform(shape), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
        return -np.log(-np.log(u))

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def truncated_normal(self, shape=(), std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) resampled until every value lies within ``bound`` std."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=shape)

    def random(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
