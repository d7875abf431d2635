"""Counter-based, splittable random streams.

A seed is an int or a tuple of non-negative ints, e.g. ``(master, epoch_index, step)``.
Each distinct tuple maps to an independent Philox stream, so results do not
depend on the order in which samples are processed.
"""
from __future__ import annotations

from typing import Union

import numpy as np

Seed = Union[int, tuple]


def key(seed: Seed, *extra: int) -> tuple[int, ...]:
    base = (seed,) if isinstance(seed, (int, np.integer)) else tuple(seed)
    out = tuple(int(v) for v in base + tuple(extra))
    if any(v < 0 for v in out):
        raise ValueError(f"seed components must be non-negative, got {out}")
    return out


def make_rng(seed: Seed, *extra: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key(seed, *extra))))
