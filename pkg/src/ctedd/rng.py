"""Deterministic random-stream derivation.

Every subsystem draws from its own Philox (counter-based) stream derived
from the experiment seed plus a label path, so parallel workers and
re-runs see identical, disjoint streams regardless of execution order.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFF


def stream(seed: int, *path) -> np.random.Generator:
    """Generator for (seed, *path); identical arguments give identical streams."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))
