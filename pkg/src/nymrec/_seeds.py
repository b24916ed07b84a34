"""Named random substreams derived from a single root seed.

Every source of randomness in the package (initialization, user
permutations, splits, synthetic data, ...) draws from its own named
substream so that runs are reproducible end to end and adding draws to
one component never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the generator for the (seed, name, *extra) substream.

    The same arguments always produce an identical stream. ``extra``
    integers distinguish repeated uses of one name, e.g. one permutation
    per training pass.
    """
    seed = int(seed)
    if seed < 0:
        raise ValueError("root seed must be non-negative")
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([seed, key, *[int(x) for x in extra]])
