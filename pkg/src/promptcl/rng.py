"""Seeded, splittable random streams.

Every stochastic component (init, sampling, augmentation, shuffling) draws from
its own child stream derived from the run seed plus a label path, so adding a
consumer never perturbs the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_part(part: int | str) -> int:
    if isinstance(part, int):
        return part & 0xFFFFFFFF
    return zlib.crc32(part.encode("utf-8"))


def make_rng(seed: int, *path: int | str) -> np.random.Generator:
    """Counter-based generator for `seed` at a labelled path.

    Same (seed, path) always yields the same stream; distinct paths are
    statistically independent.
    """
    key = tuple(_key_part(p) for p in path)
    seq = np.random.SeedSequence(entropy=seed, spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's state."""
    return _jsonable(rng.bit_generator.state)


def restore_rng(state: dict) -> np.random.Generator:
    """Rebuild a generator from a `rng_state` snapshot."""
    bitgen = np.random.Philox()
    bitgen.state = state
    return np.random.Generator(bitgen)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(x) for x in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj
