"""End-to-end training loops and prediction for the nym recommender.

Users arrive one at a time in seeded random order. Each arriving user
contributes their ratings to the active pool and privately re-picks the
nym whose current profile fits those ratings best. After every window of
``factorization_period * n_users`` user updates the aggregates are
rebuilt and the server-side factorization re-converges from its previous
state. Later passes revisit everyone in fresh permutations until an
entire pass goes by with no nym switch.

Two descent guarantees hold throughout and are cheap to monitor: every
factorization call only lowers the joint objective, and a user switches
nyms only when that strictly lowers their own residual, hence the joint
objective too.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.spatial.distance import pdist

from ._seeds import substream
from .factorization import (FactorModel, Hyperparams, aggregate_objective,
                            factorize, full_objective, init_model)
from .nyms import NymAssignment, aggregate, random_assignment
from .ratings import SparseRatings


@dataclass(frozen=True)
class Schedule:
    """Cold-start protocol knobs.

    factorization_period is the fraction of the user base between
    factorizations (1.0 = once per pass); passes bounds the number of
    full permutations.
    """

    factorization_period: float = 1.0
    passes: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.factorization_period <= 1.0:
            raise ValueError("factorization_period must lie in (0, 1]")
        if self.passes < 1:
            raise ValueError("need at least one pass")


@dataclass
class RunTrace:
    """What happened during a run, for tests and monitoring.

    ``factorizations`` holds one objective trace per factorization call.
    ``events`` (only with track_full_objective) holds (kind, value) pairs
    of the full per-rating objective on the active pool after every user
    arrival, nym switch, and factorization.
    """

    factorizations: list[list[float]] = field(default_factory=list)
    switches_per_pass: list[int] = field(default_factory=list)
    events: list[tuple[str, float]] = field(default_factory=list)
    passes_run: int = 0


@dataclass(frozen=True)
class BlcResult:
    model: FactorModel
    assignment: NymAssignment
    trace: RunTrace


def run_blc(train: SparseRatings, p: int, hyper: Hyperparams, schedule: Schedule,
            initial_model: FactorModel | None = None,
            initial_assignment: NymAssignment | None = None,
            update_nyms: bool = True,
            track_full_objective: bool = False) -> BlcResult:
    """Train a p-nym model on ``train`` with the cold-start protocol.

    ``initial_model`` / ``initial_assignment`` warm-start the run (used by
    the adaptive wrapper); by default the model is Gaussian-initialized
    and users start on uniform random nyms. ``update_nyms=False`` freezes
    the assignment, leaving pure alternating factorization.
    """
    n = train.n_users
    if n == 0:
        raise ValueError("training set has no users")
    if p < 1:
        raise ValueError("need at least one nym")

    model = initial_model if initial_model is not None else init_model(p, train.n_items, hyper)
    if model.p != p or model.m != train.n_items:
        raise ValueError("initial model shape does not match data")
    if initial_assignment is None:
        nym_of = random_assignment(n, p, schedule.seed).nym_of.copy()
    else:
        if initial_assignment.p != p or initial_assignment.n_users != n:
            raise ValueError("initial assignment does not match data")
        nym_of = initial_assignment.nym_of.copy()

    active = np.zeros(n, dtype=bool)
    window = max(1, int(round(schedule.factorization_period * n)))
    trace = RunTrace()
    preds = model.predictions()
    triplet_user = train.users

    def active_subset() -> SparseRatings:
        if active.all():
            return train
        return train.subset(active[triplet_user])

    def record(kind: str):
        value = full_objective(active_subset(), NymAssignment(nym_of, p), model)
        trace.events.append((kind, value))

    def refactorize():
        nonlocal model, preds
        agg = aggregate(active_subset(), NymAssignment(nym_of, p))
        model, obj_trace = factorize(agg, model)
        trace.factorizations.append(obj_trace)
        preds = model.predictions()
        if track_full_objective:
            record("factorize")

    for pass_idx in range(schedule.passes):
        order = substream(schedule.seed, "perm", pass_idx).permutation(n)
        switched = 0
        arrived = 0
        pending = 0
        for u in order:
            if not active[u]:
                active[u] = True
                arrived += 1
                if track_full_objective:
                    record("arrive")
            if update_nyms:
                items, values = train.user_ratings(int(u))
                if items.size:
                    diff = preds[:, items] - values
                    res = np.einsum("gk,gk->g", diff, diff)
                    best = int(np.argmin(res))
                    if res[best] < res[nym_of[u]]:
                        nym_of[u] = best
                        switched += 1
                        if track_full_objective:
                            record("switch")
            pending += 1
            if pending >= window:
                refactorize()
                pending = 0
        if pending or not trace.factorizations:
            refactorize()
        trace.switches_per_pass.append(switched)
        trace.passes_run = pass_idx + 1
        if switched == 0 and arrived == 0:
            break

    return BlcResult(model, NymAssignment(nym_of, p), trace)


@dataclass(frozen=True)
class AdaptiveConfig:
    """Growth control for learning the nym count.

    Doubling stops once the mean squared per-rating residual falls below
    error_threshold or doubling would exceed max_nyms.
    """

    error_threshold: float
    max_nyms: int = 64

    def __post_init__(self):
        if self.error_threshold <= 0:
            raise ValueError("error_threshold must be positive")
        if self.max_nyms < 1:
            raise ValueError("max_nyms must be >= 1")


@dataclass(frozen=True)
class AdaptiveStage:
    p: int
    per_rating_residual: float
    blc: BlcResult


@dataclass(frozen=True)
class StagedResult:
    """Final model plus the per-stage history of a grown run."""

    model: FactorModel
    assignment: NymAssignment
    stages: list[AdaptiveStage]


def _per_rating_residual(train: SparseRatings, assignment: NymAssignment,
                         model: FactorModel) -> float:
    """Mean squared per-rating error (data term of the full objective).

    Scored against individual ratings, not aggregates: with few nyms the
    item factors alone can fit every per-cell mean exactly (p equations,
    d unknowns per item), so an aggregate residual would report near zero
    at p <= d and growth would never start.
    """
    nym_cols = model.nym_factors[:, assignment.nym_of[train.users]]
    item_cols = model.item_factors[:, train.items]
    preds = np.einsum("dk,dk->k", nym_cols, item_cols)
    resid = train.values - preds
    return float(resid @ resid) / model.hyper.sigma2 / max(train.size, 1)


def _prune_empty_nyms(model: FactorModel, assignment: NymAssignment):
    """Drop nyms no user adopted and renumber the survivors."""
    sizes = assignment.sizes()
    keep = np.flatnonzero(sizes > 0)
    if keep.size == assignment.p:
        return model, assignment
    renumber = np.full(assignment.p, -1, dtype=np.int64)
    renumber[keep] = np.arange(keep.size)
    model = replace(model, nym_factors=model.nym_factors[:, keep])
    return model, NymAssignment(renumber[assignment.nym_of], keep.size)


def _rebalance_gauge(model: FactorModel) -> FactorModel:
    """Equalize per-direction energy between nym and item factors.

    The data term only sees the product of the two factor matrices, so
    scaling a latent direction up in one matrix and down in the other
    changes no prediction; the alternation is free to drift along this
    redundancy until nym norms dwarf item norms or vice versa. That
    drift makes inter-nym distances useless as a noise scale for
    cloning. Balancing each direction (weighted by the prior variances)
    restores data-scale nym geometry, and it can only lower the prior
    cost, so the joint objective never rises.
    """
    hyper = model.hyper
    nym_energy = np.einsum("ij,ij->i", model.nym_factors,
                           model.nym_factors) / hyper.sigma2_nym
    item_energy = np.einsum("ij,ij->i", model.item_factors,
                            model.item_factors) / hyper.sigma2_item
    live = (nym_energy > 0) & (item_energy > 0)
    scale = np.ones_like(nym_energy)
    scale[live] = (item_energy[live] / nym_energy[live]) ** 0.25
    return replace(model, nym_factors=model.nym_factors * scale[:, None],
                   item_factors=model.item_factors / scale[:, None])


def _clone_noise_std(model: FactorModel) -> float:
    """Half the smallest inter-nym gap, or the init scale for one nym."""
    if model.p > 1:
        gap = float(pdist(model.nym_factors.T).min())
        if gap > 0.0:
            return gap / 2.0
    return model.hyper.init_std


def _spawn_nyms(model: FactorModel, assignment: NymAssignment, count: int,
                rng: np.random.Generator, scale: float = 1.0, offset: int = 0):
    """Append noisy clones of the ``count`` most popular nyms.

    Copies land close to their parents (noise at half the smallest
    inter-nym gap, shrunk by ``scale``) so members of an overcrowded nym
    can fall apart into the copy without anyone jumping across the
    latent space. ``offset`` rotates which parents get cloned, counting
    down the popularity ranking.
    """
    ranking = np.argsort(-assignment.sizes(), kind="stable")
    order = ranking[(offset + np.arange(count)) % assignment.p]
    noise = rng.normal(0.0, scale * _clone_noise_std(model),
                       size=(model.d, count))
    grown = np.concatenate(
        [model.nym_factors, model.nym_factors[:, order] + noise], axis=1)
    return (replace(model, nym_factors=grown),
            NymAssignment(assignment.nym_of, assignment.p + count))


def run_blc_grown(train: SparseRatings, p: int, hyper: Hyperparams,
                  schedule: Schedule, max_attempts: int = 12) -> StagedResult:
    """Train with up to ``p`` nyms by growing the population from one.

    A run started cold at the full nym count can settle into a state
    where two user groups share a nym while another nym sits unused;
    nothing in the alternation can split them apart again. Growing
    avoids that trap: converge with a single nym, then repeatedly clone
    the most popular nyms (with a little noise) and retrain. A growth
    stage counts only if it lowers the per-rating residual; otherwise it
    is rolled back and retried with fresh noise, alternating between the
    two most popular parents and halving the noise scale every second
    attempt, since the gap inside an overcrowded nym can sit well below
    the inter-nym gap the noise rule measures. Growth stops at ``p``
    nyms, or earlier once ``max_attempts`` straight retries bring no
    improvement, so the final count never exceeds ``p`` but can land
    below it when the data has fewer groups than that.
    """
    if p < 1:
        raise ValueError("need at least one nym")
    result = run_blc(train, 1, hyper, schedule)
    model, assignment = _prune_empty_nyms(result.model, result.assignment)
    residual = _per_rating_residual(train, assignment, model)
    stages = [AdaptiveStage(assignment.p, residual, result)]
    attempt = 0
    spawn_idx = 0
    while assignment.p < p and attempt < max_attempts:
        spawn = min(assignment.p, p - assignment.p)
        rng = substream(schedule.seed, "grow", spawn_idx)
        grown_model, grown_assignment = _spawn_nyms(
            _rebalance_gauge(model), assignment, spawn, rng,
            scale=0.5 ** (attempt // 2), offset=attempt % 2)
        spawn_idx += 1
        candidate = run_blc(train, grown_assignment.p, hyper, schedule,
                            initial_model=grown_model,
                            initial_assignment=grown_assignment)
        cand_model, cand_assignment = _prune_empty_nyms(candidate.model,
                                                        candidate.assignment)
        cand_residual = _per_rating_residual(train, cand_assignment, cand_model)
        if cand_residual < residual * (1.0 - 1e-3):
            result = candidate
            model, assignment, residual = cand_model, cand_assignment, cand_residual
            stages.append(AdaptiveStage(assignment.p, residual, result))
            attempt = 0
        else:
            attempt += 1
    return StagedResult(model, assignment, stages)


def run_blc_adaptive(train: SparseRatings, hyper: Hyperparams, schedule: Schedule,
                     adaptive: AdaptiveConfig) -> StagedResult:
    """Learn the nym count: train, then double nyms until good enough.

    Starts from a single nym. Each doubling clones every nym vector and
    perturbs the copies with Gaussian noise at half the smallest
    inter-nym distance, so clones can specialize without scattering.
    Nyms that end a stage with no users are pruned. A doubling that
    neither grows the population nor improves the residual is retried
    with the noise scale halved every second attempt (up to 8 straight
    retries), since the structure worth splitting can sit at a much
    finer scale than the inter-nym gaps.
    """
    model: FactorModel | None = None
    assignment = NymAssignment(np.zeros(train.n_users, dtype=np.int64), 1)
    stages: list[AdaptiveStage] = []
    prev_p, prev_residual = 0, np.inf
    attempt = 0
    for stage_idx in range(64):  # p doubles each round; unreachable bound
        result = run_blc(train, assignment.p, hyper, schedule,
                         initial_model=model, initial_assignment=assignment)
        model, assignment = _prune_empty_nyms(result.model, result.assignment)
        residual = _per_rating_residual(train, assignment, model)
        stages.append(AdaptiveStage(assignment.p, residual, result))
        if residual < adaptive.error_threshold or 2 * assignment.p > adaptive.max_nyms:
            break
        if assignment.p > prev_p or residual < prev_residual * (1.0 - 1e-3):
            attempt = 0
        else:
            attempt += 1
            if attempt >= 8:
                break
        prev_p, prev_residual = assignment.p, residual
        rng = substream(schedule.seed, "adapt", stage_idx)
        model, assignment = _spawn_nyms(_rebalance_gauge(model), assignment,
                                        assignment.p, rng,
                                        scale=0.5 ** (attempt // 2))
    return StagedResult(model, assignment, stages)


def predict(model: FactorModel, assignment: NymAssignment, users, items,
            rated_items: np.ndarray | None = None, global_mean: float = 0.0):
    """Predict with the user's nym vector; vectorized, scalar in scalar out.

    Items absent from ``rated_items`` (a boolean mask over items) fall
    back to ``global_mean``: an unrated item's factor vector is still at
    its random initialization and would only add noise.
    """
    users_arr = np.atleast_1d(np.asarray(users, dtype=np.int64))
    items_arr = np.atleast_1d(np.asarray(items, dtype=np.int64))
    nym_cols = model.nym_factors[:, assignment.nym_of[users_arr]]
    preds = np.einsum("dk,dk->k", nym_cols, model.item_factors[:, items_arr])
    if rated_items is not None:
        preds = np.where(rated_items[items_arr], preds, global_mean)
    if np.ndim(users) == 0 and np.ndim(items) == 0:
        return float(preds[0])
    return preds


def make_predictor(model: FactorModel, assignment: NymAssignment, train: SparseRatings):
    """Predictor closure with the training-set fallback baked in."""
    rated = train.item_rating_counts() > 0
    mean = float(train.values.mean()) if train.size else 0.0

    def predictor(users, items):
        return predict(model, assignment, users, items,
                       rated_items=rated, global_mean=mean)

    return predictor


def predict_local(model: FactorModel, items, values, nym: int,
                  weight: float = 1.0, sigma2_local: float = 1000.0,
                  rated_items: np.ndarray | None = None, global_mean: float = 0.0):
    """Personalized predictor: shrink a private user vector toward a nym.

    Solves one local d x d ridge system from the user's own ratings with
    the nym vector as a soft anchor of strength ``weight``; the model
    itself is never modified. weight -> infinity recovers the plain nym
    prediction, weight = 0 with a flat prior is an ordinary least-squares
    fit to the user's ratings. Returns a vectorized item predictor.
    """
    if weight < 0:
        raise ValueError("anchor weight must be non-negative")
    if sigma2_local <= 0:
        raise ValueError("sigma2_local must be positive")
    items = np.asarray(items, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    d = model.d
    cols = model.item_factors[:, items]
    gram = (1.0 / sigma2_local + weight) * np.eye(d) + cols @ cols.T
    rhs = cols @ values + weight * model.nym_factors[:, int(nym)]
    profile = sla.solve(gram, rhs, assume_a="pos")

    def predictor(query_items):
        preds = profile @ model.item_factors[:, np.atleast_1d(
            np.asarray(query_items, dtype=np.int64))]
        if rated_items is not None:
            preds = np.where(rated_items[np.atleast_1d(query_items)], preds, global_mean)
        if np.ndim(query_items) == 0:
            return float(preds[0])
        return preds

    return predictor
