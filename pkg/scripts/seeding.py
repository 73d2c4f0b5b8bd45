"""
Seed streams. Every random draw in the package comes from a numpy Generator built
from an explicit integer seed, and sub-streams are derived by hashing (seed, tags)
through numpy's SeedSequence so that independent streams never overlap.
"""

import zlib
from typing import Union

import numpy as np

Tag = Union[int, str]


def _tag_to_int(tag: Tag) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    if tag < 0:
        raise ValueError(f"Seed tags must be non-negative, got {tag}")
    return int(tag)


def derive_seed(seed: int, *tags: Tag) -> int:
    """
    Derive a 63-bit child seed from a parent seed and a tag path.

    Args:
        seed: Parent seed (non-negative int)
        tags: Stream labels, e.g. ("train", 3)

    Returns:
        A non-negative int usable as a seed anywhere in the package
    """
    entropy = [_tag_to_int(seed)] + [_tag_to_int(t) for t in tags]
    state = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


def make_rng(seed: int, *tags: Tag) -> np.random.Generator:
    """Return a PCG64 generator for the given seed (and optional sub-stream tags)."""
    if tags:
        seed = derive_seed(seed, *tags)
    return np.random.default_rng(seed)
