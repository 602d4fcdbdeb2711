"""Named random streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Return an independent generator for ``(seed, *names)``.

    Each name is hashed with CRC32 into the seed sequence's spawn key, so
    adding draws to one stream never shifts another.
    """
    key = tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
