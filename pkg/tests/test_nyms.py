"""Nym assignment, aggregation, and the private nym choice."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from nymrec.factorization import FactorModel, Hyperparams
from nymrec.nyms import (NymAssignment, aggregate, choose_nym, load_assignment,
                         nym_residuals, random_assignment, save_assignment,
                         update_all_nyms)
from nymrec.ratings import SparseRatings


def model_of(nym_factors, item_factors, **kw):
    nym_factors = np.atleast_2d(np.asarray(nym_factors, dtype=float))
    item_factors = np.atleast_2d(np.asarray(item_factors, dtype=float))
    hyper = Hyperparams(d=nym_factors.shape[0], **kw)
    return FactorModel(nym_factors, item_factors, hyper)


def random_instance(n, m, p, d, density, seed):
    rng = np.random.default_rng(seed)
    keep = rng.random(n * m) < density
    users = np.repeat(np.arange(n), m)[keep]
    items = np.tile(np.arange(m), n)[keep]
    values = rng.normal(size=keep.sum())
    train = SparseRatings(n, m, users, items, values)
    assignment = NymAssignment(rng.integers(0, p, size=n), p)
    model = model_of(rng.normal(size=(d, p)), rng.normal(size=(d, m)))
    return train, assignment, model


class TestAssignment:
    def test_sizes(self):
        a = NymAssignment(np.array([0, 0, 2, 1, 0]), 3)
        assert_array_equal(a.sizes(), [3, 1, 1])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            NymAssignment(np.array([0, 3]), 3)
        with pytest.raises(ValueError):
            NymAssignment(np.array([-1]), 2)

    def test_random_assignment_deterministic(self):
        a = random_assignment(100, 7, seed=3)
        b = random_assignment(100, 7, seed=3)
        c = random_assignment(100, 7, seed=4)
        assert_array_equal(a.nym_of, b.nym_of)
        assert (a.nym_of != c.nym_of).any()

    def test_save_load_round_trip(self, tmp_path):
        a = random_assignment(40, 6, seed=1)
        save_assignment(a, tmp_path / "a.csv")
        b = load_assignment(tmp_path / "a.csv", p=6)
        assert_array_equal(a.nym_of, b.nym_of)


class TestAggregate:
    # Fixture: 3 users, 2 items, 2 nyms. Users 0,1 share nym 0; user 2 is nym 1.
    # u0: item0=4, item1=2.  u1: item0=2.  u2: item1=5.
    def fixture(self):
        train = SparseRatings(3, 2, [0, 0, 1, 2], [0, 1, 0, 1],
                              [4.0, 2.0, 2.0, 5.0])
        assignment = NymAssignment(np.array([0, 0, 1]), 2)
        return train, assignment

    def test_hand_computed_counts_and_means(self):
        train, assignment = self.fixture()
        agg = aggregate(train, assignment)
        assert_array_equal(agg.counts, [[2, 1], [0, 1]])
        assert_allclose(agg.means[0], [3.0, 2.0])
        assert np.isnan(agg.means[1, 0])
        assert agg.means[1, 1] == 5.0
        assert_array_equal(agg.nym_sizes, [2, 1])

    def test_filled_means_zero_where_empty(self):
        train, assignment = self.fixture()
        agg = aggregate(train, assignment)
        filled = agg.filled_means()
        assert filled[1, 0] == 0.0
        assert filled[0, 0] == 3.0

    def test_totals(self):
        train, assignment, _ = random_instance(40, 25, 4, 3, 0.5, seed=5)
        agg = aggregate(train, assignment)
        assert agg.n_ratings == train.size
        assert agg.nym_sizes.sum() == train.n_users

    def test_means_match_dense_membership_oracle(self):
        # Means must equal count^-1 * (sum of member ratings), computed here
        # through an explicit one-hot membership matrix.
        for seed in range(5):
            train, assignment, _ = random_instance(25, 12, 3, 2, 0.6, seed=seed)
            agg = aggregate(train, assignment)
            onehot = np.zeros((3, 25))
            onehot[assignment.nym_of, np.arange(25)] = 1.0
            dense = np.zeros((25, 12))
            dense[train.users, train.items] = train.values
            rated = np.zeros((25, 12))
            rated[train.users, train.items] = 1.0
            sums = onehot @ dense
            counts = onehot @ rated
            assert_array_equal(agg.counts, counts.astype(int))
            expect = np.divide(sums, counts, out=np.full((3, 12), np.nan),
                               where=counts > 0)
            assert_allclose(agg.means, expect, equal_nan=True)

    def test_mismatched_assignment_rejected(self):
        train, _ = self.fixture()
        with pytest.raises(ValueError):
            aggregate(train, NymAssignment(np.array([0, 1]), 2))


class TestChooseNym:
    def test_hand_case_prefers_better_fit(self):
        # nym 0 predicts 1.0 on both items, nym 1 predicts 2.0; truth is 2.0
        model = model_of([[1.0, 2.0]], [[1.0, 1.0]])
        assert choose_nym([0, 1], [2.0, 2.0], model) == 1

    def test_tie_breaks_to_lowest_index(self):
        model = model_of([[1.5, 1.5, 1.5]], [[1.0, 1.0]])
        assert choose_nym([0, 1], [1.0, 1.0], model) == 0
        # and among identical later nyms too
        model2 = model_of([[9.0, 1.5, 1.5]], [[1.0, 1.0]])
        assert choose_nym([0, 1], [1.5, 1.5], model2) == 1

    def test_empty_ratings_keep_current(self):
        model = model_of([[1.0, 2.0]], [[1.0]])
        assert choose_nym([], [], model, current=1) == 1
        assert choose_nym([], [], model) == 0

    def test_matches_bruteforce_residual_scan(self):
        for seed in range(8):
            rng = np.random.default_rng(100 + seed)
            p, m, d, k = 6, 15, 3, 7
            model = model_of(rng.normal(size=(d, p)), rng.normal(size=(d, m)))
            items = rng.choice(m, size=k, replace=False)
            values = rng.normal(size=k)
            best = choose_nym(items, values, model)
            res = nym_residuals(items, values, model)
            slow = [sum((float(model.nym_factors[:, g] @ model.item_factors[:, v]) - r) ** 2
                        for v, r in zip(items, values)) for g in range(p)]
            assert_allclose(res, slow, rtol=1e-12)
            assert best == int(np.argmin(slow))
            assert res[best] <= res.min() + 1e-15


class TestUpdateAllNyms:
    def test_single_nym_forces_zero(self):
        train, _, _ = random_instance(10, 6, 1, 2, 0.8, seed=7)
        assignment = NymAssignment(np.zeros(10, dtype=np.int64), 1)
        model = model_of(np.ones((2, 1)), np.ones((2, 6)))
        out = update_all_nyms(train, model, assignment)
        assert_array_equal(out.nym_of, np.zeros(10))

    def test_subset_only_touches_listed_users(self):
        train, assignment, model = random_instance(20, 10, 4, 2, 0.7, seed=8)
        out = update_all_nyms(train, model, assignment, users=[3, 5])
        untouched = np.delete(np.arange(20), [3, 5])
        assert_array_equal(out.nym_of[untouched], assignment.nym_of[untouched])

    def test_never_increases_any_users_residual(self):
        for seed in range(5):
            train, assignment, model = random_instance(30, 12, 5, 3, 0.6, seed=seed)
            out = update_all_nyms(train, model, assignment)
            for u in range(30):
                items, values = train.user_ratings(u)
                if items.size == 0:
                    continue
                res = nym_residuals(items, values, model)
                assert res[out.nym_of[u]] <= res[assignment.nym_of[u]] + 1e-12

    def test_sweep_is_idempotent_for_fixed_model(self):
        # strict-improvement rule: a second sweep finds nothing to change
        train, assignment, model = random_instance(30, 12, 5, 3, 0.6, seed=9)
        once = update_all_nyms(train, model, assignment)
        twice = update_all_nyms(train, model, once)
        assert_array_equal(once.nym_of, twice.nym_of)

    def test_ratingless_user_keeps_assignment(self):
        train = SparseRatings(3, 2, [0, 2], [0, 1], [1.0, 2.0])  # user 1 silent
        assignment = NymAssignment(np.array([0, 1, 0]), 2)
        model = model_of([[5.0, -5.0]], [[1.0, 1.0]])
        out = update_all_nyms(train, model, assignment)
        assert out.nym_of[1] == 1
