"""Named, splittable random streams.

Every stochastic site asks for ``substream(seed, name, ...)``. The name parts
are hashed (CRC-32 for strings, identity for ints) into the SeedSequence spawn
key, so streams are independent of each other and of call order. Stream names
in use:

    init                         weight initialization
    phantom, <case>              phantom generation
    shuffle, <epoch>             per-epoch sample order
    step, <epoch>, <index>       dropout + VAE sampling for one step
    augment, <epoch>, <index>    augmentation + random crop for one step
    split, <k>                   patient-grouped train/validation division
"""

import zlib

import numpy as np


def _key(part):
    if isinstance(part, (int, np.integer)):
        return int(part)
    return zlib.crc32(str(part).encode())


def substream(seed, *names) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(_key(n) for n in names)))
