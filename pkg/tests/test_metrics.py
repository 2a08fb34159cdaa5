import itertools
import logging
import math
import unittest

import numpy as np
from scipy.stats import spearmanr

from lenie.evalcore.metrics import rmse, median_ae, ndcg_at_k, spearman_corr, overlap_at_k, evaluate_predictions, \
    aggregate, rank_order, MetricContractError, MetricDomainError, MetricUndefinedError


def brute_force_ndcg(pred, truth, k):
    """
    Sorted-by-hand DCG over best and predicted orderings
    """
    cutoff = min(k, len(truth))
    by_pred = sorted(range(len(pred)), key=lambda i: (-pred[i], i))[:cutoff]
    by_truth = sorted(truth, reverse=True)[:cutoff]
    dcg = sum(truth[index] / math.log2(position + 2) for position, index in enumerate(by_pred))
    ideal = sum(value / math.log2(position + 2) for position, value in enumerate(by_truth))
    return dcg / ideal


class MetricsTestCase(unittest.TestCase):
    def setUp(self) -> None:
        logging.disable(logging.WARNING)
        self.rng = np.random.default_rng(3)

    def tearDown(self) -> None:
        logging.disable(logging.NOTSET)

    def test_errors(self):
        self.assertAlmostEqual(math.sqrt(14 / 4), rmse([1, 2, 3, 4], [2, 4, 0, 4]))
        self.assertEqual(1.5, median_ae([1, 2, 3, 4], [2, 4, 0, 4]))
        self.assertEqual(0.0, rmse([0.3], [0.3]))

    def test_ndcg_perfect_and_reversed(self):
        truth = [3.0, 2.0, 1.0, 0.0]
        self.assertAlmostEqual(1.0, ndcg_at_k([4, 3, 2, 1], truth, k=4))
        ideal = 3 + 2 / math.log2(3) + 1 / math.log2(4)
        reversed_dcg = 0 + 1 / math.log2(3) + 2 / math.log2(4) + 3 / math.log2(5)
        self.assertAlmostEqual(reversed_dcg / ideal, ndcg_at_k([1, 2, 3, 4], truth, k=4))

    def test_ndcg_matches_brute_force(self):
        for trial in range(50):
            size = int(self.rng.integers(2, 30))
            pred = self.rng.normal(size=size).tolist()
            truth = self.rng.uniform(0, 5, size=size).tolist()
            k = int(self.rng.integers(1, 40))
            self.assertAlmostEqual(brute_force_ndcg(pred, truth, k), ndcg_at_k(pred, truth, k), places=12)

    def test_ndcg_invariant_to_joint_permutation(self):
        pred = self.rng.normal(size=12)
        truth = self.rng.uniform(0, 3, size=12)
        expected = ndcg_at_k(pred, truth, k=5)
        for _ in range(20):
            order = self.rng.permutation(12)
            self.assertAlmostEqual(expected, ndcg_at_k(pred[order], truth[order], k=5), places=12)

    def test_ndcg_edge_cases(self):
        self.assertEqual(1.0, ndcg_at_k([0.5, 0.1], [0.0, 0.0], k=2))
        with self.assertRaises(MetricDomainError):
            ndcg_at_k([1, 2], [1, -1], k=2)
        with self.assertRaises(MetricContractError):
            ndcg_at_k([1, 2], [1, 2], k=0)
        self.assertAlmostEqual(ndcg_at_k([1, 3, 2], [1, 2, 3], k=3), ndcg_at_k([1, 3, 2], [1, 2, 3], k=100))

    def test_spearman_matches_scipy(self):
        for trial in range(30):
            size = int(self.rng.integers(3, 25))
            pred = self.rng.integers(0, 5, size=size).astype(float)
            truth = self.rng.normal(size=size)
            if np.all(pred == pred[0]):
                continue
            self.assertAlmostEqual(spearmanr(pred, truth)[0], spearman_corr(pred, truth), places=10)

    def test_spearman_bounds(self):
        values = [0.1, 0.5, 0.2, 0.9]
        self.assertAlmostEqual(1.0, spearman_corr(values, values))
        self.assertAlmostEqual(-1.0, spearman_corr(values, [-v for v in values]))
        with self.assertRaises(MetricUndefinedError):
            spearman_corr([1, 1, 1], [1, 2, 3])
        with self.assertRaises(MetricUndefinedError):
            spearman_corr([1], [1])

    def test_overlap(self):
        pred = [0.9, 0.8, 0.1, 0.7]
        truth = [10, 1, 9, 8]
        self.assertEqual(0.5, overlap_at_k(pred, truth, k=2))
        self.assertEqual(1.0, overlap_at_k(pred, truth, k=10))

    def test_rank_order_ties_to_lower_index(self):
        self.assertEqual([1, 3, 0, 2], rank_order(np.array([0.5, 0.9, 0.1, 0.9])).tolist())

    def test_contract(self):
        for pred, truth in (([1, 2], [1]), ([], []), ([1, float("nan")], [1, 2]), ([[1, 2]], [[1, 2]])):
            with self.assertRaises(MetricContractError):
                rmse(pred, truth)

    def test_evaluate_predictions(self):
        report = evaluate_predictions([0.3, 0.3, 0.3], [1.0, -0.5, 2.0], k=2)
        self.assertEqual(0.0, report.spearman)
        self.assertEqual(2, report.k)
        self.assertEqual(ndcg_at_k([0.3, 0.3, 0.3], [1.0, 0.0, 2.0], k=2), report.ndcg_at_k)
        self.assertEqual(["rmse", "median_ae", "ndcg_at_k", "spearman", "overlap_at_k", "k"],
                         list(report.as_dict()))

    def test_overlap_all_subsets(self):
        truth = [5, 4, 3, 2, 1]
        for top in itertools.combinations(range(5), 2):
            pred = [1.0 if index in top else 0.0 for index in range(5)]
            expected = len(set(top) & {0, 1}) / 2
            self.assertEqual(expected, overlap_at_k(pred, truth, k=2))

    def test_aggregate_population_std(self):
        self.assertEqual({"mean": 2.0, "std": 1.0}, aggregate([1.0, 3.0]))
        self.assertEqual({"mean": 4.0, "std": 0.0}, aggregate([4.0]))


if __name__ == '__main__':
    unittest.main()
