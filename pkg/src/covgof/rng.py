"""Counter-based random-number streams.

Every random draw in the package comes from a Philox generator keyed by
``(seed, domain, index)``.  Philox is counter based, so the stream for
replicate ``index`` depends only on that key: results are identical no
matter in which order replicates run or across how many workers they are
spread.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep independent uses of the same user seed from colliding.
DOMAIN_DATA = 0        # simulation harness: data generation, replicate r
DOMAIN_TEST = 1        # simulation harness: per-replicate test seed
DOMAIN_BOOT = 2        # bootstrap replicate streams inside one test
DOMAIN_FOLLOWUP = 3    # per-outcome follow-up test seeds
DOMAIN_MISC = 4

_MASK64 = (1 << 64) - 1


def stream(seed: int, domain: int, index: int) -> np.random.Generator:
    """Return the generator for ``(seed, domain, index)``.

    ``index`` must fit in 32 bits (4e9 replicates), ``domain`` in 31.
    """
    if not 0 <= index < (1 << 32):
        raise ValueError(f"stream index out of range: {index}")
    key = np.empty(2, dtype=np.uint64)
    key[0] = np.uint64(int(seed) & _MASK64)
    key[1] = np.uint64((int(domain) << 32) | int(index))
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, domain: int, index: int) -> int:
    """Derive a 63-bit child seed, e.g. for a nested test run."""
    return int(stream(seed, domain, index).integers(0, 1 << 63))
