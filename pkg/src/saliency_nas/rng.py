"""Named, independent random streams derived from one integer seed.

Each stream is a Philox (counter-based) generator keyed by the run seed and
a CRC of the stream name, so drawing from one subsystem never shifts the
numbers another subsystem sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key,))
    return np.random.Generator(np.random.Philox(ss))
