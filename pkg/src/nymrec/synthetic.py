"""Clustered low-rank synthetic rating data.

Users sit in p groups around Gaussian group centres; ratings are exact
inner products of user and item feature vectors, so with zero
within-group spread every member of a group produces an identical rating
row. A Bernoulli mask then hides a fraction of the matrix, and the hidden
part is kept as the fill-in evaluation target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._seeds import substream
from .ratings import SparseRatings, remove_entries


@dataclass(frozen=True)
class SyntheticSpec:
    p_groups: int
    n_users: int
    m_items: int
    d: int
    cluster_std: float = 0.0
    center_std: float = 1.0
    item_std: float = 1.0
    missing_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.p_groups < 1 or self.n_users < 1 or self.m_items < 1 or self.d < 1:
            raise ValueError("dimensions must be positive")
        if self.p_groups > self.n_users:
            raise ValueError("cannot have more groups than users")
        if min(self.cluster_std, self.center_std, self.item_std) < 0:
            raise ValueError("spreads must be non-negative")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ValueError("missing_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class SyntheticInstance:
    """Generated data plus the ground truth that produced it."""

    ratings: SparseRatings
    heldout: SparseRatings
    true_labels: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray

    def oracle(self, users, items):
        """True rating for any (user, item), observed or not."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        return np.einsum("dk,dk->k", self.user_factors[:, np.atleast_1d(users)],
                         self.item_factors[:, np.atleast_1d(items)])


def generate(spec: SyntheticSpec) -> SyntheticInstance:
    """Draw one instance; byte-identical for identical specs.

    Group sizes differ by at most one user and labels come in contiguous
    blocks. All draws come from the 'synthetic' substream, the hiding mask
    from the 'remove' substream.
    """
    rng = substream(spec.seed, "synthetic")
    centers = rng.normal(0.0, spec.center_std, size=(spec.d, spec.p_groups))

    base, extra = divmod(spec.n_users, spec.p_groups)
    sizes = np.full(spec.p_groups, base, dtype=np.int64)
    sizes[:extra] += 1
    labels = np.repeat(np.arange(spec.p_groups), sizes)

    user_factors = centers[:, labels]
    if spec.cluster_std > 0:
        user_factors = user_factors + rng.normal(
            0.0, spec.cluster_std, size=(spec.d, spec.n_users))
    item_factors = rng.normal(0.0, spec.item_std, size=(spec.d, spec.m_items))

    dense = user_factors.T @ item_factors
    users = np.repeat(np.arange(spec.n_users), spec.m_items)
    items = np.tile(np.arange(spec.m_items), spec.n_users)
    full = SparseRatings(spec.n_users, spec.m_items, users, items, dense.ravel())
    kept, removed = remove_entries(full, spec.missing_fraction, spec.seed,
                                   return_removed=True)
    return SyntheticInstance(kept, removed, labels, np.ascontiguousarray(user_factors),
                             item_factors)
