"""Server-side factorization of nym aggregates.

Fits nym feature vectors (d x p) and item feature vectors (d x m) by
alternating exact ridge solves. The data term weights each squared
residual between a cell's mean rating and the model's prediction by that
cell's rater count, which makes the objective equal, up to an additive
constant that does not depend on the factors, to the posterior objective
one would get from the raw per-user ratings. Zero-count cells carry no
information and are excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from ._seeds import substream
from .nyms import NymAggregates
from .ratings import SparseRatings


class DivergenceError(ArithmeticError):
    """The objective became non-finite; indicates broken inputs."""


@dataclass(frozen=True)
class Hyperparams:
    """Model dimensions, noise/prior variances, and stopping control.

    Only the ratios noise_variance / prior_variance enter the updates, so
    scaling all three variances together leaves the fit unchanged.
    """

    d: int
    sigma2: float = 1.0
    sigma2_nym: float = 1000.0
    sigma2_item: float = 1000.0
    epsilon: float = 1e-4
    max_iters: int = 200
    init_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("latent dimension must be >= 1")
        if min(self.sigma2, self.sigma2_nym, self.sigma2_item) <= 0:
            raise ValueError("variances must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.init_std < 0:
            raise ValueError("init_std must be non-negative")


@dataclass(frozen=True)
class FactorModel:
    """Public model state: nym_factors is d x p, item_factors is d x m."""

    nym_factors: np.ndarray
    item_factors: np.ndarray
    hyper: Hyperparams

    def __post_init__(self):
        nf = np.ascontiguousarray(self.nym_factors, dtype=np.float64)
        itf = np.ascontiguousarray(self.item_factors, dtype=np.float64)
        if nf.ndim != 2 or itf.ndim != 2 or nf.shape[0] != itf.shape[0]:
            raise ValueError("factor matrices must share the latent dimension")
        if nf.shape[0] != self.hyper.d:
            raise ValueError("factor matrices do not match hyper.d")
        object.__setattr__(self, "nym_factors", nf)
        object.__setattr__(self, "item_factors", itf)

    @property
    def d(self) -> int:
        return self.nym_factors.shape[0]

    @property
    def p(self) -> int:
        return self.nym_factors.shape[1]

    @property
    def m(self) -> int:
        return self.item_factors.shape[1]

    def copy(self) -> "FactorModel":
        return FactorModel(self.nym_factors.copy(), self.item_factors.copy(), self.hyper)

    def predictions(self) -> np.ndarray:
        """Dense p x m prediction table."""
        return self.nym_factors.T @ self.item_factors


def init_model(p: int, m: int, hyper: Hyperparams) -> FactorModel:
    """Gaussian init from the 'init' substream of hyper.seed."""
    rng = substream(hyper.seed, "init")
    nym_factors = rng.normal(0.0, hyper.init_std, size=(hyper.d, p))
    item_factors = rng.normal(0.0, hyper.init_std, size=(hyper.d, m))
    return FactorModel(nym_factors, item_factors, hyper)


def update_nym_factors(agg: NymAggregates, model: FactorModel) -> np.ndarray:
    """Exact minimization over the nym factors with items held fixed.

    Each nym that has at least one aggregated rating solves its own d x d
    ridge system, weighted by per-item rater counts. Nyms with no ratings
    keep their current vector; the ridge term makes every system positive
    definite.
    """
    hyper = model.hyper
    ridge = hyper.sigma2 / hyper.sigma2_nym
    counts = agg.counts.astype(np.float64)
    means = agg.filled_means()
    v = model.item_factors
    new_u = model.nym_factors.copy()
    ridge_eye = ridge * np.eye(hyper.d)
    for g in np.flatnonzero(agg.counts.sum(axis=1) > 0):
        weights = counts[g]
        gram = ridge_eye + (v * weights) @ v.T
        rhs = v @ (weights * means[g])
        new_u[:, g] = sla.solve(gram, rhs, assume_a="pos")
    return new_u


def update_item_factors(agg: NymAggregates, model: FactorModel) -> np.ndarray:
    """Exact minimization over the item factors with nyms held fixed.

    All rated items are solved in one batched call; items nobody rated
    keep their current vector.
    """
    hyper = model.hyper
    ridge = hyper.sigma2 / hyper.sigma2_item
    u = model.nym_factors
    active = np.flatnonzero(agg.counts.sum(axis=0) > 0)
    new_v = model.item_factors.copy()
    if active.size == 0:
        return new_v
    counts = agg.counts[:, active].astype(np.float64)
    means = agg.filled_means()[:, active]
    grams = np.einsum("dg,gv,eg->vde", u, counts, u)
    grams += ridge * np.eye(hyper.d)
    rhs = u @ (counts * means)
    # ridge makes each system positive definite; batched solve, no inverse
    new_v[:, active] = np.linalg.solve(grams, rhs.T[:, :, None])[:, :, 0].T
    return new_v


def aggregate_objective(agg: NymAggregates, model: FactorModel) -> float:
    """Count-weighted squared error on non-empty cells plus ridge terms."""
    hyper = model.hyper
    diff = agg.filled_means() - model.predictions()
    loss = float(np.sum(agg.counts * diff * diff)) / hyper.sigma2
    loss += float(np.sum(model.nym_factors ** 2)) / hyper.sigma2_nym
    loss += float(np.sum(model.item_factors ** 2)) / hyper.sigma2_item
    return loss


def full_objective(train: SparseRatings, assignment, model: FactorModel) -> float:
    """Per-rating squared error plus ridge terms.

    Differs from aggregate_objective on matching data only by a constant
    in the factors (the within-cell rating variance), so both define the
    same minimizers.
    """
    hyper = model.hyper
    nym_cols = model.nym_factors[:, assignment.nym_of[train.users]]
    item_cols = model.item_factors[:, train.items]
    preds = np.einsum("dk,dk->k", nym_cols, item_cols)
    resid = train.values - preds
    loss = float(resid @ resid) / hyper.sigma2
    loss += float(np.sum(model.nym_factors ** 2)) / hyper.sigma2_nym
    loss += float(np.sum(model.item_factors ** 2)) / hyper.sigma2_item
    return loss


def factorize(agg: NymAggregates, model: FactorModel) -> tuple[FactorModel, list[float]]:
    """Alternate exact nym/item updates until the objective stabilizes.

    Stops when the relative change |new - old| / (1 + |new|) drops below
    hyper.epsilon or after hyper.max_iters update pairs. Returns the new
    model and the objective trace; trace[0] is the incoming model's
    objective and the trace never increases, since every half-step is an
    exact block minimization.
    """
    trace = [aggregate_objective(agg, model)]
    if not np.isfinite(trace[0]):
        raise DivergenceError("objective is not finite at start")
    for _ in range(model.hyper.max_iters):
        model = replace(model, nym_factors=update_nym_factors(agg, model))
        model = replace(model, item_factors=update_item_factors(agg, model))
        value = aggregate_objective(agg, model)
        if not np.isfinite(value):
            raise DivergenceError("objective diverged")
        prev = trace[-1]
        trace.append(value)
        if abs(value - prev) / (1.0 + abs(value)) < model.hyper.epsilon:
            break
    return model, trace


def save_model(model: FactorModel, path) -> None:
    """Binary dump of both factor matrices and the hyperparameters."""
    hyper = model.hyper
    np.savez(
        path,
        nym_factors=model.nym_factors,
        item_factors=model.item_factors,
        hyper=np.array([hyper.d, hyper.sigma2, hyper.sigma2_nym, hyper.sigma2_item,
                        hyper.epsilon, hyper.max_iters, hyper.init_std, hyper.seed]),
    )


def load_model(path) -> FactorModel:
    with np.load(path) as data:
        h = data["hyper"]
        hyper = Hyperparams(d=int(h[0]), sigma2=float(h[1]), sigma2_nym=float(h[2]),
                            sigma2_item=float(h[3]), epsilon=float(h[4]),
                            max_iters=int(h[5]), init_std=float(h[6]), seed=int(h[7]))
        return FactorModel(data["nym_factors"], data["item_factors"], hyper)
