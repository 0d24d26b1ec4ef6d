"""Named, splittable random streams.

Every random draw in a run comes from a stream derived from the single run
seed plus a tuple of names, e.g. ``stream(seed, "chain", k, j)``.  Streams use
the counter-based Philox bit generator, so distinct names give independent
streams and the result of any computation does not depend on the order in
which streams are created or on how work is spread across workers.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(seed: int, *names) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key(n) for n in names))


def stream(seed: int, *names) -> np.random.Generator:
    """Return the generator for the named sub-stream of ``seed``."""
    return np.random.Generator(np.random.Philox(seed_sequence(seed, *names)))


def derive_seed(seed: int, *names) -> int:
    """Integer seed for the named sub-stream (for APIs that take ints)."""
    return int(seed_sequence(seed, *names).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
