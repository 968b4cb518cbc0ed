"""Named random sub-streams derived from a single seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "shuffle", "eval")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``.

    Re-seeding one stream never perturbs another.
    """
    key = (zlib.crc32(name.encode()),) + tuple(int(e) for e in extra)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))
