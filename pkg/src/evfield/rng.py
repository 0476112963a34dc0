"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def substream(root_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; changing one stream never perturbs another."""
    key = (zlib.crc32(name.encode()),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(root_seed), spawn_key=key))


def subseed(root_seed: int, name: str) -> int:
    return int(substream(root_seed, name).integers(2**63 - 1))
