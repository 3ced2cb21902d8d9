"""Named random streams derived from a single run seed.

Every consumer of randomness (episode sampling, fluency masking, batch order,
weight init) draws from its own stream, so toggling one feature never shifts
the draws of another.
"""
import zlib

import numpy as np


def stream_key(name):
    """Stable 32-bit key for a stream name."""
    return zlib.crc32(name.encode('utf-8'))


def named_rng(seed, stream, *extra):
    """
    Create an independent generator for (seed, stream, *extra).

    Args:
        seed (int): Run seed
        stream (str): Stream name such as 'sampling' or 'masking'
        *extra (int): Further integers (e.g. epoch) mixed into the key

    Returns:
        numpy.random.Generator: Deterministic generator
    """
    entropy = [int(seed) & 0xFFFFFFFF, stream_key(stream)]
    entropy.extend(int(value) & 0xFFFFFFFF for value in extra)
    return np.random.default_rng(np.random.SeedSequence(entropy))
