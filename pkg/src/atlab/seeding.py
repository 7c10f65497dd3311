"""Run-seed splitting.

Every random draw in a run comes from ``stream(seed, purpose, *keys)``: a
``numpy.random.Generator`` seeded with the entropy tuple
``(seed, PURPOSES[purpose], *keys)``. Distinct purposes (or keys such as
epoch and batch index) therefore never share a stream, and a stream's output
does not depend on how many other streams were drawn from before it.
"""
from __future__ import annotations

import numpy as np

PURPOSES = {
    "init": 0,
    "shuffle": 1,
    "attack": 2,
    "direction": 3,
    "eval": 4,
    "data": 5,
}


def stream(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise KeyError(f"unknown rng purpose {purpose!r}")
    if seed < 0 or any(k < 0 for k in keys):
        raise ValueError("seeds and stream keys must be non-negative")
    return np.random.default_rng([int(seed), PURPOSES[purpose], *(int(k) for k in keys)])
