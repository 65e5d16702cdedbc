"""
Seed handling shared by every randomized operation.

A run has one master seed; each stage draws from its own stream at a fixed
offset from it, so re-running one stage reproduces exactly what a full run
would have done at that stage.
"""

from typing import Optional, Union

import numpy as np

SeedLike = Union[int, np.random.Generator, None]

STAGE_OFFSETS = {
    "vae_1": 101,
    "vae_2": 102,
    "subset_1": 201,
    "subset_2": 202,
    "transfer_1to2": 301,
    "transfer_2to1": 302,
    "classifier_1": 401,
    "classifier_2": 402,
    "eval": 501,
    "sample": 601,
    "grid": 602,
    "shuffle": 701,
    "ablation": 801,
}


def make_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def derive_seed(master_seed: int, stage: str, index: Optional[int] = None) -> int:
    """Seed of ``stage`` (and its ``index``-th repetition) under ``master_seed``."""
    seed = master_seed * 10_000 + STAGE_OFFSETS[stage]
    if index is not None:
        seed = seed * 100 + index
    return seed
