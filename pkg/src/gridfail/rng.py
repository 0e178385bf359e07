"""Counter-based random streams keyed by simulation coordinates.

Every draw comes from a Philox generator whose 128-bit key is a hash of
``(seed, *key)``. Streams therefore do not depend on the order in which
episodes are generated or on how many workers generate them.
"""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *key) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((int(seed),) + tuple(str(k) for k in key)).encode())
    return int.from_bytes(h.digest(), "little")


def stream(seed: int, *key) -> np.random.Generator:
    """Independent generator for the named coordinates, e.g. ``stream(7, "chronic_3", "load")``."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *key)))


def step_block(seed: int, *key, steps: int, width: int) -> np.ndarray:
    """Standard normals of shape ``(steps, width)``; row t is the draw for step t.

    The counter of the underlying Philox stream advances with the step
    index, so row t is identical whatever the block length.
    """
    g = stream(seed, *key)
    return g.standard_normal((steps, width)) if width else np.zeros((steps, 0))
