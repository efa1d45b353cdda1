"""Named, independently reseedable RNG streams.

All randomness in the project flows from one root seed. Components ask for a
stream by name (and optional integer index, e.g. an episode index), so
parallel work is order-independent and any component can be replayed in
isolation.
"""

from __future__ import annotations

import zlib

import numpy as np

# Stream names used across the project; free-form names are also allowed.
STREAMS = ("synth", "split", "init", "dropout", "sampler", "bootstrap", "batch")


def stream(root_seed: int, name: str, *indices: int) -> np.random.Generator:
    """Return a generator for the named stream under the given root seed."""
    key = [int(root_seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))]
    key.extend(int(i) & 0xFFFFFFFF for i in indices)
    return np.random.default_rng(key)
