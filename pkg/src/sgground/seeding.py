"""Named deterministic random substreams derived from one user-facing seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """A generator that depends only on (seed, name), stable across runs.

    crc32 keeps the name -> entropy mapping platform-independent (the builtin
    hash() is randomized per process).
    """
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
