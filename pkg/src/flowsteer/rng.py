"""Seeded, splittable random streams.

Every random draw in the package comes from ``stream(seed, *path)``: a Philox
(counter-based) generator keyed by the 64-bit root seed and a path of labels,
so independent consumers never share or perturb each other's sequences.
"""

import zlib

import numpy as np


def _word(label):
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed, *path):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    entropy = [seed & 0xFFFFFFFF, seed >> 32] + [_word(p) for p in path]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
