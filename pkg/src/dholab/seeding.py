"""Named random streams derived from a single run seed.

Each consumer (data split, init, batch order, teacher noise, ...) gets an
independent generator, so changing how one stream is consumed never shifts
another.
"""
from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def rng_for(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_key(stream)]))
