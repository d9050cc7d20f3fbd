"""Counter-based random streams.

Every component draws from its own Philox-4x64 generator. The 128-bit key is
``(stream_id << 96) | (sub << 64) | seed``: the low word is the user's 64-bit
seed, the high words select the component stream and an optional sub-stream,
so each component is reproducible in isolation regardless of what others draw.
"""

from __future__ import annotations

import numpy as np

STREAMS = {"data": 0, "init": 1, "shuffle": 2, "noise": 3}
MASK64 = (1 << 64) - 1


def stream(seed: int, component: str, sub: int = 0) -> np.random.Generator:
    if component not in STREAMS:
        raise KeyError(f"unknown random stream {component!r}; known: {sorted(STREAMS)}")
    seed = int(seed)
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = (STREAMS[component] << 96) | ((int(sub) & 0xFFFFFFFF) << 64) | seed
    return np.random.Generator(np.random.Philox(key=key))
