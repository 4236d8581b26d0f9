"""Named, seed-derived random streams.

Every consumer of randomness asks for a stream by (seed, label, *index) so
that results never depend on call order or worker scheduling.
"""

import zlib

import numpy as np

RNG_ID = "pcg64"

_U64 = (1 << 64) - 1


def derive_rng(seed: int, label: str, *index: int) -> np.random.Generator:
    """PCG64 generator for the stream named ``label`` under ``seed``.

    The label is folded into the spawn key via CRC32, so two components using
    the same seed still draw independent streams.
    """
    key = (zlib.crc32(label.encode("utf-8")),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed) & _U64, spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
