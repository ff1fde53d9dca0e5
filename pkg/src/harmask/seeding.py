"""Counter-based derivation of per-subsystem random streams from one root seed."""

from __future__ import annotations

import numpy as np

STREAMS = {"data": 1, "init": 2, "masks": 3, "train": 4, "probe": 5, "eval": 6, "control": 7}


def stream_seed(root: int, name: str, *counters: int) -> list[int]:
    return [int(root), STREAMS[name], *(int(c) for c in counters)]


def rng_for(root: int, name: str, *counters: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root, name, *counters))


def int_seed(root: int, name: str, *counters: int) -> int:
    return int(rng_for(root, name, *counters).integers(2**63 - 1))
