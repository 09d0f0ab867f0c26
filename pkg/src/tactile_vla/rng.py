"""Named, independently seeded random streams.

Each concern (``"init"``, ``"data"``, ``"sim"``, ...) gets its own generator derived
from ``(seed, name)``, so adding draws to one stream never shifts another.
"""

import zlib

import numpy as np


def stream(seed: int, *names: str | int) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFF]
    for name in names:
        if isinstance(name, int):
            words.append(name & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(name.encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))
