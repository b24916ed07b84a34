"""Clustered low-rank synthetic data generator."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from nymrec.synthetic import SyntheticSpec, generate


class TestGenerate:
    def test_deterministic_per_seed(self):
        spec = SyntheticSpec(p_groups=3, n_users=30, m_items=20, d=2,
                             cluster_std=0.1, missing_fraction=0.4, seed=5)
        a, b = generate(spec), generate(spec)
        assert_array_equal(a.ratings.values, b.ratings.values)
        assert_array_equal(a.heldout.values, b.heldout.values)
        other = generate(SyntheticSpec(p_groups=3, n_users=30, m_items=20, d=2,
                                       cluster_std=0.1, missing_fraction=0.4,
                                       seed=6))
        assert (a.ratings.size != other.ratings.size
                or (a.ratings.values != other.ratings.values).any())

    def test_group_sizes_differ_by_at_most_one(self):
        inst = generate(SyntheticSpec(p_groups=3, n_users=10, m_items=5, d=2))
        sizes = np.bincount(inst.true_labels)
        assert_array_equal(sizes, [4, 3, 3])
        assert_array_equal(inst.true_labels, sorted(inst.true_labels))

    def test_ratings_are_exact_inner_products(self):
        spec = SyntheticSpec(p_groups=4, n_users=25, m_items=15, d=3,
                             cluster_std=0.2, missing_fraction=0.3, seed=7)
        inst = generate(spec)
        expect = inst.oracle(inst.ratings.users, inst.ratings.items)
        # no noise is ever added; only summation order may differ
        assert_allclose(inst.ratings.values, expect, rtol=1e-13, atol=1e-13)

    def test_zero_spread_gives_identical_rows_within_group(self):
        spec = SyntheticSpec(p_groups=3, n_users=12, m_items=8, d=2,
                             cluster_std=0.0, seed=8)
        inst = generate(spec)
        dense = np.full((12, 8), np.nan)
        dense[inst.ratings.users, inst.ratings.items] = inst.ratings.values
        for g in range(3):
            members = np.flatnonzero(inst.true_labels == g)
            for u in members[1:]:
                assert_array_equal(dense[u], dense[members[0]])

    def test_missing_mask_partitions_the_grid(self):
        spec = SyntheticSpec(p_groups=2, n_users=20, m_items=30, d=2,
                             missing_fraction=0.5, seed=9)
        inst = generate(spec)
        assert inst.ratings.size + inst.heldout.size == 20 * 30
        keys = np.concatenate([
            inst.ratings.users * 30 + inst.ratings.items,
            inst.heldout.users * 30 + inst.heldout.items])
        assert_array_equal(np.sort(keys), np.arange(20 * 30))

    def test_retained_count_within_three_sigma(self):
        spec = SyntheticSpec(p_groups=5, n_users=100, m_items=100, d=4,
                             missing_fraction=0.5, seed=10)
        inst = generate(spec)
        sigma = np.sqrt(10000 * 0.25)
        assert abs(inst.ratings.size - 5000) <= 3 * sigma

    def test_heldout_values_come_from_the_same_oracle(self):
        spec = SyntheticSpec(p_groups=2, n_users=10, m_items=10, d=2,
                             missing_fraction=0.4, seed=11)
        inst = generate(spec)
        assert_allclose(inst.heldout.values,
                        inst.oracle(inst.heldout.users, inst.heldout.items))

    def test_invalid_specs_rejected(self):
        with pytest.raises(ValueError):
            SyntheticSpec(p_groups=0, n_users=10, m_items=5, d=2)
        with pytest.raises(ValueError):
            SyntheticSpec(p_groups=11, n_users=10, m_items=5, d=2)
        with pytest.raises(ValueError):
            SyntheticSpec(p_groups=2, n_users=10, m_items=5, d=2,
                          missing_fraction=1.0)
        with pytest.raises(ValueError):
            SyntheticSpec(p_groups=2, n_users=10, m_items=5, d=2,
                          cluster_std=-0.1)
