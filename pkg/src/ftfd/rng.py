"""Named random streams.

Seeding several consumers with the same integer hands each of them the same
underlying bit stream, so draws that should be independent (which videos are
fake, where test clips start) end up correlated. Every consumer instead asks
for its own stream by purpose.
"""

import zlib

import numpy as np


def stream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(purpose.encode("ascii"))])
