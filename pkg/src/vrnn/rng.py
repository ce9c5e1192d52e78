"""Named, splittable random streams.

Every random draw in the library comes from ``stream(seed, *names)``. The
stream is a counter-based Philox generator keyed by the root seed and a stable
hash of the name path, so streams for different purposes are independent and
the same (seed, names) pair always reproduces the same draws regardless of
the order in which other streams were consumed.
"""

import hashlib

import numpy as np


def _name_key(names):
    text = "/".join(str(n) for n in names).encode("utf-8")
    digest = hashlib.sha256(text).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(seed, *names):
    """Return a ``numpy.random.Generator`` for the named sub-stream of ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, *_name_key(names)])
    return np.random.Generator(np.random.Philox(seq))
