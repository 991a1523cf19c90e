import zlib

import numpy as np

# Named substreams of the root seed
SIM = 'sim'
INIT = 'init'
BATCHING = 'batching'
RESELECT = 'reselect'
TRIALS = 'trials'
EVAL = 'eval'
VERIFY = 'verify'


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Independent generator for (seed, name, counters...).

    The name is hashed to a stable integer, so the same triple always maps to
    the same stream regardless of creation order or thread.
    """
    # the counter count is part of the key: zero-padded entropy would otherwise collide
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode('utf-8')), len(counters)] + [int(c) for c in counters]
    return np.random.default_rng(np.random.SeedSequence(key))
