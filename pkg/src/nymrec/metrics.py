"""Accuracy and privacy measurements.

Privacy here is measured against the server's view: how large is the
crowd each user hides in (guessing probability), and how strongly does a
nym membership suggest having rated a particular item (association
probability).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nyms import NymAggregates, NymAssignment
from .ratings import SparseRatings

ASSOCIATION_MODES = ("users", "ratings")


def rmse(predictor, test: SparseRatings, clip: tuple[float, float] | None = None) -> float:
    """Root mean squared error of ``predictor`` on the test triplets.

    The predictor is tried vectorized (arrays of users and items); if it
    only handles scalars we fall back to a loop. Predictions are not
    clipped unless a (low, high) ``clip`` range is given.
    """
    if test.size == 0:
        raise ValueError("cannot score an empty test set")
    try:
        preds = np.asarray(predictor(test.users, test.items), dtype=np.float64)
        if preds.shape != test.values.shape:
            raise TypeError("predictor is not vectorized")
    except (TypeError, ValueError, IndexError):
        preds = np.array([float(predictor(int(u), int(v)))
                          for u, v in zip(test.users, test.items)])
    if clip is not None:
        low, high = clip
        preds = np.clip(preds, low, high)
    diff = preds - test.values
    return math.sqrt(float(diff @ diff) / test.size)


def guessing_probability(assignment: NymAssignment) -> float:
    """Chance of naming a user's nym correctly in one guess: the largest
    nym's share of the population. Lies in [1/p, 1]; lower is better."""
    if assignment.n_users == 0:
        raise ValueError("assignment has no users")
    return float(assignment.sizes().max()) / assignment.n_users


def association_probability(agg: NymAggregates, mode: str = "users") -> np.ndarray:
    """p x m matrix: how strongly nym membership implies rating an item.

    mode 'users' divides each cell count by the nym's user count (the
    fraction of members who rated the item); mode 'ratings' divides by the
    nym's total rating count instead. Rows with a zero denominator are NaN.
    """
    if mode not in ASSOCIATION_MODES:
        raise ValueError(f"mode must be one of {ASSOCIATION_MODES}")
    counts = agg.counts.astype(np.float64)
    if mode == "users":
        denom = agg.nym_sizes.astype(np.float64)
    else:
        denom = counts.sum(axis=1)
    out = np.full(counts.shape, np.nan)
    np.divide(counts, denom[:, None], out=out, where=denom[:, None] > 0)
    return out


@dataclass(frozen=True)
class PrivacyReport:
    """Summary of what the server's view reveals about individual users."""

    guessing_probability: float
    nym_sizes: np.ndarray
    association: np.ndarray
    worst_item: np.ndarray
    worst_association: np.ndarray
    mode: str


def privacy_report(assignment: NymAssignment, agg: NymAggregates,
                   mode: str = "users") -> PrivacyReport:
    """Guessing probability plus each nym's most identifying item."""
    assoc = association_probability(agg, mode=mode)
    p = assoc.shape[0]
    worst_item = np.full(p, -1, dtype=np.int64)
    worst_assoc = np.full(p, np.nan)
    for g in range(p):
        row = assoc[g]
        if np.isnan(row).all():
            continue
        worst_item[g] = int(np.nanargmax(row))
        worst_assoc[g] = row[worst_item[g]]
    return PrivacyReport(
        guessing_probability=guessing_probability(assignment),
        nym_sizes=assignment.sizes(),
        association=assoc,
        worst_item=worst_item,
        worst_association=worst_assoc,
        mode=mode,
    )
