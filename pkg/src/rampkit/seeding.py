"""Named random sub-streams derived from one global seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(key,)))


def derive_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(0, 2**63 - 1))
