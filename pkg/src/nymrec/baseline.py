"""Classic per-user alternating least squares baseline.

The reference point the nym recommender is measured against: identical
model and priors, but every user keeps an individual factor vector, so
the server must see raw ratings. Mathematically this is the nym model
with one user per nym.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .factorization import DivergenceError, Hyperparams, init_model
from .ratings import SparseRatings


@dataclass(frozen=True)
class UserFactorModel:
    """user_factors is d x n, item_factors is d x m."""

    user_factors: np.ndarray
    item_factors: np.ndarray
    hyper: Hyperparams

    @property
    def d(self) -> int:
        return self.user_factors.shape[0]

    @property
    def n_users(self) -> int:
        return self.user_factors.shape[1]

    @property
    def m(self) -> int:
        return self.item_factors.shape[1]


def _objective(train: SparseRatings, user_f, item_f, hyper: Hyperparams) -> float:
    preds = np.einsum("dk,dk->k", user_f[:, train.users], item_f[:, train.items])
    resid = train.values - preds
    loss = float(resid @ resid) / hyper.sigma2
    loss += float(np.sum(user_f ** 2)) / hyper.sigma2_nym
    loss += float(np.sum(item_f ** 2)) / hyper.sigma2_item
    return loss


def _ridge_phase(entity_ids, n_entities, other_cols, values, other_factors,
                 ridge, current):
    """Solve one ALS half-step: a d x d ridge system per active entity.

    Systems are accumulated with bincount (fixed summation order, no
    per-entity Python loop) and solved in one batched call. Entities with
    no ratings keep their current vector.
    """
    d = other_factors.shape[0]
    cols = other_factors[:, other_cols]
    grams = np.empty((n_entities, d, d))
    for i in range(d):
        for j in range(i, d):
            acc = np.bincount(entity_ids, weights=cols[i] * cols[j], minlength=n_entities)
            grams[:, i, j] = acc
            grams[:, j, i] = acc
    rhs = np.empty((n_entities, d))
    for i in range(d):
        rhs[:, i] = np.bincount(entity_ids, weights=cols[i] * values, minlength=n_entities)
    grams += ridge * np.eye(d)
    active = np.bincount(entity_ids, minlength=n_entities) > 0
    new = current.copy()
    if active.any():
        new[:, active] = np.linalg.solve(grams[active], rhs[active, :, None])[:, :, 0].T
    return new


def als_factorize(train: SparseRatings, hyper: Hyperparams) -> tuple[UserFactorModel, list[float]]:
    """Alternating ridge regression on raw per-user ratings.

    Same initialization stream, update order, and stopping rule as the
    nym factorization, so a nym run with one user per nym reproduces this
    trace up to floating-point noise.
    """
    seed_model = init_model(train.n_users, train.n_items, hyper)
    user_f = seed_model.nym_factors
    item_f = seed_model.item_factors
    ridge_u = hyper.sigma2 / hyper.sigma2_nym
    ridge_v = hyper.sigma2 / hyper.sigma2_item
    trace = [_objective(train, user_f, item_f, hyper)]
    if not np.isfinite(trace[0]):
        raise DivergenceError("objective is not finite at start")
    for _ in range(hyper.max_iters):
        user_f = _ridge_phase(train.users, train.n_users, train.items,
                              train.values, item_f, ridge_u, user_f)
        item_f = _ridge_phase(train.items, train.n_items, train.users,
                              train.values, user_f, ridge_v, item_f)
        value = _objective(train, user_f, item_f, hyper)
        if not np.isfinite(value):
            raise DivergenceError("objective diverged")
        prev = trace[-1]
        trace.append(value)
        if abs(value - prev) / (1.0 + abs(value)) < hyper.epsilon:
            break
    return UserFactorModel(user_f, item_f, hyper), trace


def predict_baseline(model: UserFactorModel, users, items,
                     rated_items: np.ndarray | None = None,
                     global_mean: float = 0.0):
    """Dot-product prediction; unseen items fall back to the global mean.

    Vectorized over arrays; scalars in, scalar out.
    """
    users_arr = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items_arr = np.atleast_1d(np.asarray(items, dtype=np.int64))
    preds = np.einsum("dk,dk->k", model.user_factors[:, users_arr],
                      model.item_factors[:, items_arr])
    if rated_items is not None:
        preds = np.where(rated_items[items_arr], preds, global_mean)
    if np.isscalar(users) or (np.ndim(users) == 0 and np.ndim(items) == 0):
        return float(preds[0])
    return preds


def make_baseline_predictor(model: UserFactorModel, train: SparseRatings):
    """Predictor closure with the training-set fallback baked in."""
    rated = train.item_rating_counts() > 0
    mean = float(train.values.mean()) if train.size else 0.0

    def predictor(users, items):
        return predict_baseline(model, users, items, rated_items=rated, global_mean=mean)

    return predictor
