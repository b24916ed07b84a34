"""Accuracy and privacy metrics."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from nymrec.metrics import (association_probability, guessing_probability,
                            privacy_report, rmse)
from nymrec.nyms import NymAggregates, NymAssignment, aggregate
from nymrec.ratings import SparseRatings


def tiny_test_set():
    return SparseRatings(2, 2, [0, 1], [0, 1], [2.0, 4.0])


class TestRmse:
    def test_hand_value(self):
        test = tiny_test_set()
        predictor = lambda users, items: np.where(np.asarray(users) == 0, 1.0, 2.0)
        # errors 1 and 2 -> sqrt(5/2)
        assert_allclose(rmse(predictor, test), np.sqrt(2.5), rtol=1e-12)

    def test_perfect_predictor_scores_zero(self):
        test = tiny_test_set()
        lookup = {(0, 0): 2.0, (1, 1): 4.0}
        assert rmse(lambda u, v: lookup[(u, v)], test) == 0.0

    def test_scalar_only_predictor_falls_back_to_loop(self):
        test = tiny_test_set()

        def scalar_pred(u, v):
            if u == 0:  # raises on arrays, forcing the loop path
                return 1.0
            return 2.0

        vec_pred = lambda users, items: np.where(np.asarray(users) == 0, 1.0, 2.0)
        assert_allclose(rmse(scalar_pred, test), rmse(vec_pred, test), rtol=1e-14)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        n = 500
        users = rng.integers(0, 50, n)
        items = rng.integers(0, 40, n)
        values = rng.normal(size=n)
        test = SparseRatings(50, 40, users, items, values)
        perm = rng.permutation(n)
        shuffled = SparseRatings(50, 40, users[perm], items[perm], values[perm])
        predictor = lambda u, v: np.asarray(u) * 0.1 - np.asarray(v) * 0.05
        assert_allclose(rmse(predictor, test), rmse(predictor, shuffled),
                        rtol=1e-12)

    def test_clip_flag(self):
        test = SparseRatings(1, 1, [0], [0], [5.0])
        predictor = lambda u, v: np.full(np.asarray(u).shape, 10.0)
        assert rmse(predictor, test) == 5.0
        assert rmse(predictor, test, clip=(0.0, 6.0)) == 1.0

    def test_empty_test_set_rejected(self):
        empty = SparseRatings(3, 3, [], [], [])
        with pytest.raises(ValueError):
            rmse(lambda u, v: 0.0, empty)


class TestGuessingProbability:
    def test_equal_sizes_give_inverse_p(self):
        assignment = NymAssignment(np.repeat(np.arange(4), 5), 4)
        assert guessing_probability(assignment) == 0.25

    def test_hand_value(self):
        assignment = NymAssignment(np.array([0, 0, 0, 1]), 2)
        assert guessing_probability(assignment) == 0.75

    def test_single_nym_gives_one(self):
        assignment = NymAssignment(np.zeros(9, dtype=int), 1)
        assert guessing_probability(assignment) == 1.0

    def test_bounds_over_random_assignments(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            p = int(rng.integers(1, 8))
            assignment = NymAssignment(rng.integers(0, p, size=50), p)
            p_g = guessing_probability(assignment)
            assert 1.0 / p <= p_g <= 1.0


class TestAssociationProbability:
    # same fixture as the aggregation tests: counts [[2,1],[0,1]], sizes [2,1]
    def fixture(self):
        train = SparseRatings(3, 2, [0, 0, 1, 2], [0, 1, 0, 1],
                              [4.0, 2.0, 2.0, 5.0])
        assignment = NymAssignment(np.array([0, 0, 1]), 2)
        return aggregate(train, assignment), assignment

    def test_users_mode_hand_values(self):
        agg, _ = self.fixture()
        got = association_probability(agg, mode="users")
        assert_allclose(got, [[1.0, 0.5], [0.0, 1.0]])

    def test_ratings_mode_hand_values(self):
        agg, _ = self.fixture()
        got = association_probability(agg, mode="ratings")
        assert_allclose(got, [[2 / 3, 1 / 3], [0.0, 1.0]])

    def test_entries_within_unit_interval(self):
        rng = np.random.default_rng(2)
        for seed in range(5):
            n, m, p = 40, 15, 4
            keep = rng.random(n * m) < 0.5
            users = np.repeat(np.arange(n), m)[keep]
            items = np.tile(np.arange(m), n)[keep]
            train = SparseRatings(n, m, users, items, rng.normal(size=keep.sum()))
            assignment = NymAssignment(rng.integers(0, p, n), p)
            agg = aggregate(train, assignment)
            for mode in ("users", "ratings"):
                vals = association_probability(agg, mode=mode)
                finite = vals[~np.isnan(vals)]
                assert ((finite >= 0.0) & (finite <= 1.0)).all()

    def test_empty_nym_row_is_nan(self):
        counts = np.array([[2, 1], [0, 0]])
        means = np.where(counts > 0, 1.0, np.nan)
        agg = NymAggregates(counts, means, np.array([3, 0]))
        got = association_probability(agg, mode="users")
        assert np.isnan(got[1]).all()
        assert not np.isnan(got[0]).any()

    def test_unknown_mode_rejected(self):
        agg, _ = self.fixture()
        with pytest.raises(ValueError):
            association_probability(agg, mode="items")


class TestPrivacyReport:
    def test_worst_item_per_nym(self):
        agg, assignment = TestAssociationProbability().fixture()
        report = privacy_report(assignment, agg)
        assert report.guessing_probability == 2 / 3
        assert_array_equal(report.nym_sizes, [2, 1])
        assert_array_equal(report.worst_item, [0, 1])
        assert_allclose(report.worst_association, [1.0, 1.0])
