import math
import os
import unittest

os.environ.setdefault("DIFFKNOCK_LOG_FILE", "0")

import numpy as np

from diffknock.core.errors import ConfigError, DataError
from diffknock.services.selection import (
    evaluate_selection,
    false_discovery_proportion,
    knockoff_plus_select,
    knockoff_plus_threshold,
    selection_frequency,
)
from diffknock.services.statistics import KnockoffStatistics


def brute_force_tau(W, q):
    best = math.inf
    for t in np.abs(W):
        if t == 0:
            continue
        ratio = (1 + sum(1 for w in W if w <= -t)) / max(sum(1 for w in W if w >= t), 1)
        if ratio <= q and t < best:
            best = float(t)
    return best


class KnockoffPlusTests(unittest.TestCase):
    def test_smallest_qualifying_threshold(self):
        result = knockoff_plus_select([3.0, 2.0, -1.0, 0.5], 0.5)
        self.assertEqual(result.tau, 2.0)
        self.assertEqual(result.selected, [0, 1])
        self.assertAlmostEqual(result.estimated_fdp, 0.5)

    def test_all_negative_selects_nothing(self):
        result = knockoff_plus_select([-1.0, -0.5, -2.0], 0.3)
        self.assertTrue(math.isinf(result.tau))
        self.assertEqual(result.selected, [])
        self.assertIsNone(result.estimated_fdp)

    def test_five_equal_values(self):
        result = knockoff_plus_select([1.0] * 5, 0.2)
        self.assertEqual(result.tau, 1.0)
        self.assertEqual(result.selected, [0, 1, 2, 3, 4])

    def test_zero_statistics_never_selected(self):
        result = knockoff_plus_select([0.0] * 8 + [5.0] * 10, 0.2)
        self.assertEqual(result.selected, list(range(8, 18)))

    def test_names_and_method_are_carried(self):
        stats = KnockoffStatistics(np.array([4.0, 3.0, 2.0, 1.0, 5.0]), "gradient")
        result = knockoff_plus_select(stats, 0.25, names=["a", "b", "c", "d", "e"])
        self.assertEqual(result.method, "gradient")
        self.assertEqual(result.selected_names, ["a", "b", "c", "d", "e"])

    def test_matches_brute_force_on_random_vectors(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            p = int(rng.integers(1, 65))
            W = np.round(rng.normal(0.5, 1.0, size=p), 1)
            q = float(rng.choice([0.05, 0.1, 0.2, 0.3, 0.5]))
            self.assertEqual(knockoff_plus_threshold(W, q), brute_force_tau(W, q))

    def test_larger_q_never_shrinks_selection(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            W = rng.normal(0.3, 1.0, size=30)
            small = set(knockoff_plus_select(W, 0.1).selected)
            large = set(knockoff_plus_select(W, 0.3).selected)
            self.assertTrue(small <= large)

    def test_positive_scaling_keeps_selection(self):
        rng = np.random.default_rng(2)
        W = rng.normal(0.5, 1.0, size=40)
        self.assertEqual(knockoff_plus_select(W, 0.2).selected, knockoff_plus_select(W * 7.5, 0.2).selected)

    def test_invalid_arguments(self):
        for q in (0.0, 1.0, -0.1):
            with self.assertRaises(ConfigError):
                knockoff_plus_threshold([1.0], q)
        with self.assertRaises(DataError):
            knockoff_plus_threshold([], 0.2)
        with self.assertRaises(DataError):
            knockoff_plus_threshold([1.0, np.nan], 0.2)


class EvaluationTests(unittest.TestCase):
    def test_power_and_fdp(self):
        out = evaluate_selection([1, 2, 7], [1, 2, 3, 4, 5])
        self.assertAlmostEqual(out.power, 0.4)
        self.assertAlmostEqual(out.fdp, 1 / 3)
        self.assertEqual((out.true_positives, out.false_positives), (2, 1))

    def test_empty_selection(self):
        out = evaluate_selection([], [0, 1])
        self.assertEqual((out.power, out.fdp), (0.0, 0.0))

    def test_perfect_selection(self):
        out = evaluate_selection([3, 4], [4, 3])
        self.assertEqual((out.power, out.fdp), (1.0, 0.0))

    def test_empty_truth(self):
        with self.assertRaises(DataError):
            evaluate_selection([1], [])
        self.assertEqual(false_discovery_proportion([1], []), 1.0)


class FrequencyTests(unittest.TestCase):
    def test_percentages_sorted_descending(self):
        frame = selection_frequency([["b", "a"], ["b"], ["c", "b"], []], names=["a", "b", "c", "d"])
        self.assertEqual(frame["feature"].tolist(), ["b", "a", "c", "d"])
        self.assertEqual(frame["percent"].tolist(), [75.0, 25.0, 25.0, 0.0])


if __name__ == "__main__":
    unittest.main()
