"""Independent random streams keyed by (seed, client, purpose)."""
import zlib

import numpy as np

_NEG = zlib.crc32(b"negative")


def stream(seed: int, *keys) -> np.random.Generator:
    """A generator that depends only on ``seed`` and the ordered ``keys``.

    String keys are hashed with crc32 so the mapping is stable across
    processes (unlike ``hash()``).
    """
    words = [int(seed)]
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode()))
        elif int(k) < 0:  # e.g. source=-1 for "no client"
            words += [_NEG, -int(k)]
        else:
            words.append(int(k))
    return np.random.default_rng(np.random.SeedSequence(words))
