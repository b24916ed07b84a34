"""User-side group identities (nyms) and the aggregates the server sees.

Each user adopts exactly one nym. The server never receives individual
ratings: for every (nym, item) cell it gets the rater count and the mean
rating, which is all the factorization needs. Picking a nym is a purely
local computation from the user's own ratings and the public model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np

from ._seeds import substream
from .ratings import SparseRatings

if TYPE_CHECKING:
    from .factorization import FactorModel


@dataclass(frozen=True)
class NymAssignment:
    """Maps every user to one of ``p`` nyms."""

    nym_of: np.ndarray
    p: int

    def __post_init__(self):
        arr = np.ascontiguousarray(self.nym_of, dtype=np.int64)
        if arr is self.nym_of:
            arr = arr.copy()  # keep the caller's array writable
        if arr.ndim != 1:
            raise ValueError("nym_of must be a 1-d array")
        if self.p < 1:
            raise ValueError("need at least one nym")
        if arr.size and (arr.min() < 0 or arr.max() >= self.p):
            raise ValueError("nym index out of range")
        arr.setflags(write=False)
        object.__setattr__(self, "nym_of", arr)

    @property
    def n_users(self) -> int:
        return self.nym_of.size

    def sizes(self) -> np.ndarray:
        """Number of users per nym, shape (p,)."""
        return np.bincount(self.nym_of, minlength=self.p)


def random_assignment(n_users: int, p: int, seed: int = 0) -> NymAssignment:
    """Uniform independent initial nyms, from the 'assign' substream."""
    nym_of = substream(seed, "assign").integers(0, p, size=n_users)
    return NymAssignment(nym_of, p)


@dataclass(frozen=True)
class NymAggregates:
    """Server-visible summary: per-(nym, item) rater counts and mean ratings.

    ``means`` is NaN where the count is zero; such cells carry no
    information and never enter the objective.
    """

    counts: np.ndarray
    means: np.ndarray
    nym_sizes: np.ndarray

    @property
    def p(self) -> int:
        return self.counts.shape[0]

    @property
    def n_items(self) -> int:
        return self.counts.shape[1]

    @property
    def n_ratings(self) -> int:
        return int(self.counts.sum())

    def rated_mask(self) -> np.ndarray:
        return self.counts > 0

    def filled_means(self, fill: float = 0.0) -> np.ndarray:
        """means with empty cells replaced, safe for dense arithmetic."""
        return np.where(self.counts > 0, self.means, fill)


def aggregate(train: SparseRatings, assignment: NymAssignment) -> NymAggregates:
    """Fold raw ratings into per-(nym, item) counts and means.

    Counts are exact integers and sums run in fixed array order, so the
    result is deterministic for a given triplet order.
    """
    if assignment.n_users != train.n_users:
        raise ValueError("assignment does not cover this rating matrix")
    p, m = assignment.p, train.n_items
    nym_of_triplet = assignment.nym_of[train.users]
    keys = nym_of_triplet * m + train.items
    counts = np.bincount(keys, minlength=p * m).reshape(p, m)
    sums = np.bincount(keys, weights=train.values, minlength=p * m).reshape(p, m)
    means = np.divide(sums, counts, out=np.full((p, m), np.nan), where=counts > 0)
    return NymAggregates(counts.astype(np.int64), means, assignment.sizes())


def nym_residuals(items, values, model: "FactorModel") -> np.ndarray:
    """Sum of squared prediction errors on (items, values) for every nym.

    Shape (p,). Uses only the public model, never other users' data.
    """
    items = np.asarray(items, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    preds = model.nym_factors.T @ model.item_factors[:, items]
    diff = preds - values
    return np.einsum("gk,gk->g", diff, diff)


def choose_nym(items, values, model: "FactorModel", current: int | None = None) -> int:
    """Best-fitting nym for a user's own ratings.

    Brute-force minimum over all nyms; ties go to the lowest index. A user
    with no ratings keeps ``current`` (or 0 if none given).
    """
    items = np.asarray(items, dtype=np.int64)
    if items.size == 0:
        return 0 if current is None else int(current)
    return int(np.argmin(nym_residuals(items, values, model)))


def update_all_nyms(train: SparseRatings, model: "FactorModel",
                    assignment: NymAssignment,
                    users: Iterable[int] | None = None) -> NymAssignment:
    """One user-side sweep: each listed user re-picks their best nym.

    A user moves only if the new nym strictly reduces their residual, so a
    sweep never worsens the joint objective and repeated sweeps cannot
    oscillate between equally good nyms. Users outside ``users`` and users
    with no ratings keep their assignment.
    """
    if assignment.n_users != train.n_users:
        raise ValueError("assignment does not cover this rating matrix")
    new = assignment.nym_of.copy()
    preds = model.nym_factors.T @ model.item_factors
    user_iter = range(train.n_users) if users is None else users
    for u in user_iter:
        items, values = train.user_ratings(int(u))
        if items.size == 0:
            continue
        diff = preds[:, items] - values
        res = np.einsum("gk,gk->g", diff, diff)
        best = int(np.argmin(res))
        if res[best] < res[new[u]]:
            new[u] = best
    return NymAssignment(new, assignment.p)


def save_assignment(assignment: NymAssignment, path) -> None:
    """CSV export: one ``user,nym`` row per user."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("user,nym\n")
        for u, g in enumerate(assignment.nym_of):
            fh.write(f"{u},{g}\n")


def load_assignment(path, p: int | None = None) -> NymAssignment:
    rows = np.loadtxt(path, dtype=np.int64, delimiter=",", skiprows=1, ndmin=2)
    nym_of = np.zeros(rows.shape[0], dtype=np.int64)
    nym_of[rows[:, 0]] = rows[:, 1]
    if p is None:
        p = int(nym_of.max()) + 1 if nym_of.size else 1
    return NymAssignment(nym_of, p)


def save_aggregates(agg: NymAggregates, path) -> None:
    """CSV export of the non-empty cells: ``nym,item,count,mean``."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("nym,item,count,mean\n")
        for g, v in zip(*np.nonzero(agg.counts)):
            fh.write(f"{g},{v},{agg.counts[g, v]},{float(agg.means[g, v])!r}\n")
