"""Deterministic derivation of sub-seeds from one root seed.

Every consumer of randomness in the pipeline gets its own stream derived as

    SeedSequence(root, spawn_key=(purpose, *indices))

NumPy's ``SeedSequence`` mixes entropy and spawn key through a counter-based
hash, so streams for distinct paths are statistically independent and a
single root seed reproduces an entire sweep bit for bit.

Purpose codes (first element of every spawn key):

====== ===========================================
DATASET  synthetic data generation
SPLIT    train/test splitting
HALVE    expert-pool / stacking-pool halving
PARTITION  random assignment of points to experts
EXPERT   hyperparameter-optimization restarts
BASIS    spectral-frequency sampling, keyed (BASIS, group, index)
CHAIN    per-chain MCMC streams
INIT     per-chain initial position draws
CELL     per-cell seeds inside a sweep
====== ===========================================
"""

from __future__ import annotations

import numpy as np

DATASET = 0
SPLIT = 1
HALVE = 2
PARTITION = 3
EXPERT = 4
BASIS = 5
CHAIN = 6
INIT = 7
CELL = 8
MAP = 9

# spawn-key codes for the latent-function groups of the fusion models
GROUP_CODES = {"mean": 0, "scale": 1, "weight": 2}


def child(root: int, *path: int) -> np.random.SeedSequence:
    """Seed sequence for the stream identified by ``path`` under ``root``."""
    return np.random.SeedSequence(int(root), spawn_key=tuple(int(p) for p in path))


def generator(root: int, *path: int) -> np.random.Generator:
    """Fresh ``Generator`` for the stream identified by ``path``."""
    return np.random.default_rng(child(root, *path))


def derive_int(root: int, *path: int) -> int:
    """A plain integer seed derived from ``path``, for APIs that take ints."""
    return int(child(root, *path).generate_state(2, np.uint32)[0])
