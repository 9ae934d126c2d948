"""Splittable random streams.

Every stream is ``Philox`` keyed by ``SeedSequence(entropy=seed, spawn_key=keys)``.
The keys name the consumer, e.g. ``(D, STREAM_TRAIN)`` for the training noise
of the run with ``D`` latent variables, so any run in a sweep can be
reproduced on its own.
"""
from __future__ import annotations

import numpy as np

STREAM_INIT = 0
STREAM_TRAIN = 1
STREAM_EVAL = 2
STREAM_SAMPLE = 3
STREAM_DATA = 4
STREAM_MCMC = 5


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *keys: int) -> int:
    """A 64-bit integer seed for the named sub-stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
