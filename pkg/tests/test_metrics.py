"""
Tests for accuracy, forgetting and learning-curve measures
"""

import unittest

import numpy as np

from engine.errors import MetricError
from engine.metrics import (
    avg_accuracy,
    current_task_lcas,
    forgetting_rate,
    jaccard,
    lca,
    lca_seen_tasks,
    normalized_fr,
    paired_delta,
    profile_point,
)
from engine.models import RunLog


def brute_force_fr(matrix):
    size = len(matrix)
    total = 0.0
    for j in range(size - 1):
        best = -np.inf
        for k in range(j, size):
            best = max(best, matrix[k][j])
        total += best - matrix[size - 1][j]
    return total / (size - 1)


def random_matrix(rng, size):
    return [list(rng.uniform(size=k + 1)) for k in range(size)]


class TestAccuracyAndForgetting(unittest.TestCase):
    """Test average accuracy and forgetting rate"""

    def setUp(self):
        self.matrix = [[0.9], [0.8, 0.85], [0.7, 0.75, 0.6]]

    def test_avg_accuracy(self):
        """Test the mean of the final row"""
        self.assertAlmostEqual(avg_accuracy(self.matrix), (0.7 + 0.75 + 0.6) / 3)

    def test_worked_example(self):
        """Test forgetting of the three-task example is 0.15"""
        self.assertAlmostEqual(forgetting_rate(self.matrix), 0.15)

    def test_no_forgetting(self):
        """Test a matrix that never drops has zero forgetting"""
        self.assertEqual(forgetting_rate([[0.5], [0.5, 0.6], [0.7, 0.6, 0.9]]), 0.0)

    def test_single_task_undefined(self):
        """Test forgetting needs two tasks"""
        with self.assertRaises(MetricError):
            forgetting_rate([[0.9]])

    def test_empty_matrix(self):
        """Test the empty matrix is rejected"""
        with self.assertRaises(MetricError):
            avg_accuracy([])

    def test_matches_brute_force(self):
        """Test random matrices against a direct double loop"""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            matrix = random_matrix(rng, int(rng.integers(2, 8)))
            self.assertAlmostEqual(forgetting_rate(matrix), brute_force_fr(matrix), delta=1e-12)
            self.assertGreaterEqual(forgetting_rate(matrix), 0.0)

    def test_shift_invariant(self):
        """Test adding a constant to every entry leaves forgetting unchanged"""
        matrix = random_matrix(np.random.default_rng(1), 5)
        shifted = [[v + 0.25 for v in row] for row in matrix]
        self.assertAlmostEqual(forgetting_rate(matrix), forgetting_rate(shifted))


class TestLearningCurves(unittest.TestCase):
    """Test learning-curve area measures"""

    def test_lca_mean(self):
        """Test LCA is the mean of the curve"""
        self.assertAlmostEqual(lca([0.2, 0.4, 0.6]), 0.4)

    def test_empty_curve(self):
        """Test an empty curve is rejected"""
        with self.assertRaises(MetricError):
            lca([])

    def test_seen_tasks_uses_mean_column(self):
        """Test the seen-task LCA reads the mean-over-seen column"""
        self.assertAlmostEqual(lca_seen_tasks([[0.9, 0.5], [1.0, 0.7]]), 0.6)

    def test_current_task_lcas(self):
        """Test one LCA per task from the current-task column"""
        log = RunLog(round_curves=[[[0.2, 0.2], [0.4, 0.4]], [[0.6, 0.3], [1.0, 0.5]]])
        np.testing.assert_allclose(current_task_lcas(log), [0.3, 0.8])

    def test_supervised_run_has_no_lca(self):
        """Test runs without round curves have no LCA"""
        with self.assertRaises(MetricError):
            current_task_lcas(RunLog(accuracy_matrix=[[0.9]]))


class TestProfileAndRatios(unittest.TestCase):
    """Test profile points, normalised forgetting and set overlap"""

    def test_ideal_profile(self):
        """Test a perfect learner without forgetting sits at (1, 0)"""
        log = RunLog(accuracy_matrix=[[1.0], [1.0, 1.0]],
                     round_curves=[[[1.0, 1.0]], [[1.0, 1.0]]])
        point = profile_point(log, "ideal")
        self.assertEqual((point.lca, point.forgetting_rate, point.label), (1.0, 0.0, "ideal"))

    def test_normalized_fr(self):
        """Test the ratio and its undefined case"""
        self.assertAlmostEqual(normalized_fr(0.1, 0.2), 0.5)
        self.assertEqual(normalized_fr(0.3, 0.3), 1.0)
        with self.assertRaises(MetricError):
            normalized_fr(0.1, 0.0)

    def test_jaccard(self):
        """Test overlap of sets including the empty case"""
        self.assertAlmostEqual(jaccard([1, 2, 3], [2, 3, 4]), 0.5)
        self.assertEqual(jaccard([], []), 1.0)
        self.assertEqual(jaccard([1], [2]), 0.0)
        self.assertEqual(jaccard([4, 5], [5, 4]), 1.0)

    def test_paired_delta(self):
        """Test mean difference and its standard error"""
        mean, err = paired_delta([0.5, 0.7], [0.4, 0.4])
        self.assertAlmostEqual(mean, 0.2)
        self.assertAlmostEqual(err, np.std([0.1, 0.3], ddof=1) / np.sqrt(2))
        self.assertEqual(paired_delta([0.5], [0.5]), (0.0, 0.0))

    def test_paired_delta_lengths(self):
        """Test unequal or empty inputs are rejected"""
        with self.assertRaises(MetricError):
            paired_delta([0.1], [0.1, 0.2])
        with self.assertRaises(MetricError):
            paired_delta([], [])


if __name__ == '__main__':
    unittest.main()
