"""Labeled, counter-based random streams.

Every random consumer derives its own stream from the run seed plus a tuple
of labels, hashed with BLAKE2b into a 128-bit Philox key.  Adding a new
consumer never shifts the draws of an existing one, and per-trajectory
streams do not depend on how many trajectories are simulated.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(seed: int, *labels: object) -> int:
    text = "|".join([str(int(seed))] + [str(label) for label in labels])
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed: int, *labels: object) -> int:
    """64-bit integer seed for a labeled sub-stream."""
    return derive_key(seed, *labels) & 0xFFFF_FFFF_FFFF_FFFF


def rng_for(seed: int, *labels: object) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *labels)))
