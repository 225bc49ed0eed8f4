"""Named deterministic random substreams.

Every stochastic stage draws from its own generator derived from the
run seed plus a stage name, so reordering or skipping stages never
shifts the numbers of another stage.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *names: str) -> np.random.Generator:
    """Generator for (seed, names...); stable across runs and platforms."""
    keys = [int(seed) & 0xFFFFFFFF]
    keys += [zlib.crc32(n.encode()) for n in names]
    return np.random.default_rng(keys)
