"""Aggregation baseline tests."""

import datetime as dt

import numpy as np
import pytest

from detectbert.baselines import (
    BASELINE_KINDS,
    aggregate,
    baseline_forward,
    init_baseline,
    select_index,
)
from detectbert.model import Bag


def bag_of(rows, app_id="app-x", label=1):
    return Bag(app_id, label, dt.date(2019, 3, 1), np.asarray(rows, dtype=np.float64))


class TestAggregate:
    def test_constant_bag(self):
        r = np.array([1.5, -2.0, 0.25])
        bag = bag_of(np.tile(r, (4, 1)))
        for kind in ("elementwise_average", "random_selection"):
            params = init_baseline(kind, d=3, seed=0)
            np.testing.assert_allclose(aggregate(bag, params, 7), r.reshape(1, 3), atol=0)
        params = init_baseline("elementwise_addition", d=3, seed=0)
        np.testing.assert_allclose(aggregate(bag, params, 7), 4 * r.reshape(1, 3), atol=1e-12)

    def test_hand_arithmetic(self):
        bag = bag_of([[1.0, 2.0], [3.0, 4.0]])
        add = aggregate(bag, init_baseline("elementwise_addition", 2, 0), 0)
        avg = aggregate(bag, init_baseline("elementwise_average", 2, 0), 0)
        np.testing.assert_array_equal(add, [[4.0, 6.0]])
        np.testing.assert_array_equal(avg, [[2.0, 3.0]])

    def test_random_selection_is_deterministic(self):
        rng = np.random.default_rng(0)
        bag = bag_of(rng.standard_normal((9, 4)))
        params = init_baseline("random_selection", 4, seed=3)
        first = aggregate(bag, params, epoch_seed=42)
        second = aggregate(bag, params, epoch_seed=42)
        np.testing.assert_array_equal(first, second)
        assert select_index("app-x", 9, 42) == select_index("app-x", 9, 42)

    def test_different_seeds_can_pick_different_rows(self):
        picks = {select_index("app-x", 50, s) for s in range(30)}
        assert len(picks) > 5

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown baseline kind"):
            init_baseline("max_pooling", 4, 0)


class TestBaselineForward:
    def test_zero_weights_give_bias(self):
        rng = np.random.default_rng(1)
        bag = bag_of(rng.standard_normal((5, 4)))
        params = init_baseline("elementwise_average", 4, 0)
        params.head_weights.value[:] = 0.0
        params.head_bias.value[:] = 1.25
        assert baseline_forward(bag, params, 0).item() == pytest.approx(1.25)

    def test_average_equals_mean_of_per_instance_logits(self):
        rng = np.random.default_rng(2)
        rows = rng.standard_normal((6, 5))
        bag = bag_of(rows)
        params = init_baseline("elementwise_average", 5, 0)
        w = params.head_weights.value
        b = params.head_bias.value[0, 0]
        per_instance = rows @ w + b
        got = baseline_forward(bag, params, 0).item()
        assert got == pytest.approx(per_instance.mean(), abs=1e-12)

    def test_addition_logit_doubles_on_doubled_bag(self):
        rng = np.random.default_rng(3)
        rows = rng.standard_normal((4, 3))
        params = init_baseline("elementwise_addition", 3, 0)
        b = params.head_bias.value[0, 0]
        single = baseline_forward(bag_of(rows), params, 0).item()
        doubled = baseline_forward(bag_of(np.vstack([rows, rows])), params, 0).item()
        assert doubled - b == pytest.approx(2 * (single - b), abs=1e-9)


class TestInvariants:
    def test_average_and_addition_are_permutation_invariant(self):
        rng = np.random.default_rng(4)
        rows = rng.standard_normal((8, 6))
        perm = rng.permutation(8)
        for kind in ("elementwise_average", "elementwise_addition"):
            params = init_baseline(kind, 6, 0)
            base = aggregate(bag_of(rows), params, 0)
            shuffled = aggregate(bag_of(rows[perm]), params, 0)
            assert np.abs(base - shuffled).max() < 1e-12

    def test_addition_equals_average_times_n(self):
        rng = np.random.default_rng(5)
        for n in (1, 2, 7, 23):
            rows = rng.standard_normal((n, 4))
            add = aggregate(bag_of(rows), init_baseline("elementwise_addition", 4, 0), 0)
            avg = aggregate(bag_of(rows), init_baseline("elementwise_average", 4, 0), 0)
            assert np.abs(add - avg * n).max() < 1e-9

    def test_kinds_cover_the_three_baselines(self):
        assert set(BASELINE_KINDS) == {
            "random_selection",
            "elementwise_addition",
            "elementwise_average",
        }
