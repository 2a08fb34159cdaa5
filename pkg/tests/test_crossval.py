import logging
import unittest

import mock
import numpy as np

from lenie.embedcore.matrix import EmbeddingMatrix
from lenie.evalcore.crossval import kfold_split, grid_search_lr, cross_validate, FoldConfigError, GridSearchError, \
    DEFAULT_LR_GRID
from lenie.evalcore.metrics import MetricReport
from lenie.kgcore.graph import KnowledgeGraph, Entity, Relation, Triplet
from lenie.kgcore.labels import ImportanceLabel
from lenie.niecore.models import ModelConfig, NodeFeatureTable, ModelTrainingError


def line_dataset(num_nodes: int, scale: float, seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=scale, size=(num_nodes, 3))
    stored = x.astype(np.float32).astype(np.float64)
    y = stored @ np.array([0.5, -0.2, 0.1]) + 1.0
    entities = [Entity(i, f"n{i}") for i in range(num_nodes)]
    triplets = [Triplet(i, 0, (i + 1) % num_nodes) for i in range(num_nodes)]
    kg = KnowledgeGraph(entities, [Relation(0, "next")], triplets)
    features = NodeFeatureTable(list(range(num_nodes)), EmbeddingMatrix(x))
    labels = [ImportanceLabel(i, float(y[i])) for i in range(num_nodes)]
    return kg, features, labels


def fold_cells(rmse_value: float, folds: int):
    return [(MetricReport(rmse_value, 0.0, 1.0, 0.5, 1.0, k=10), {fold: 0.0}) for fold in range(folds)]


class KFoldSplitTestCase(unittest.TestCase):
    def test_partition(self):
        nodes = list(range(100, 123))
        splits = kfold_split(nodes, 5, seed=7)
        self.assertEqual([5, 5, 5, 4, 4], [len(split.test) for split in splits])
        held_out = [node for split in splits for node in split.test]
        self.assertEqual(sorted(nodes), sorted(held_out))
        for split in splits:
            self.assertEqual([node for node in nodes if node not in split.test], split.train)
            self.assertEqual(sorted(split.test), split.test)

    def test_seeded(self):
        nodes = list(range(40))
        self.assertEqual(kfold_split(nodes, 4, seed=1), kfold_split(nodes, 4, seed=1))
        self.assertNotEqual(kfold_split(nodes, 4, seed=1), kfold_split(nodes, 4, seed=2))

    def test_incorrect_split(self):
        with self.assertRaises(FoldConfigError):
            kfold_split([0, 1, 2], 1, seed=0)
        with self.assertRaises(FoldConfigError):
            kfold_split([0, 1, 2], 4, seed=0)
        with self.assertRaises(FoldConfigError):
            kfold_split([0, 1, 1], 2, seed=0)


class GridSearchTestCase(unittest.TestCase):
    def setUp(self) -> None:
        logging.disable(logging.WARNING)

    def tearDown(self) -> None:
        logging.disable(logging.NOTSET)

    def test_default_grid(self):
        kg, features, labels = line_dataset(30, 1.0, seed=5)
        config = ModelConfig("linreg", epochs=50, l2=0.0)
        best_lr, report = grid_search_lr(config, kg, features, labels, DEFAULT_LR_GRID, folds=3, seed=2, k=10)
        self.assertEqual(8, len(report.grid))
        self.assertEqual(sorted(repr(lr) for lr in DEFAULT_LR_GRID), sorted(report.grid))
        finite = {float(lr): value for lr, value in report.grid.items() if value is not None}
        self.assertEqual(min(finite, key=lambda lr: (finite[lr], lr)), best_lr)
        self.assertEqual(best_lr, report.learning_rate)
        self.assertEqual(3, len(report.folds))
        self.assertEqual(list(range(30)), sorted(report.predictions))
        self.assertAlmostEqual(finite[best_lr], report.aggregate()["rmse"]["mean"])

    def test_diverged_rates_skipped(self):
        kg, features, labels = line_dataset(24, 10.0, seed=8)
        config = ModelConfig("linreg", epochs=100, l2=0.0)
        best_lr, report = grid_search_lr(config, kg, features, labels, [0.5, 0.001, 0.0001], folds=4, seed=0)
        self.assertIsNone(report.grid["0.5"])
        self.assertIsNotNone(report.grid["0.001"])
        self.assertEqual(0.001, best_lr)

    @mock.patch("lenie.evalcore.crossval.cross_validate")
    def test_tie_goes_to_smaller_rate(self, mock_cross_validate):
        kg, features, labels = line_dataset(10, 1.0, seed=1)
        mock_cross_validate.return_value = {0: fold_cells(0.2, 2), 1: fold_cells(0.2, 2), 2: fold_cells(0.3, 2)}
        best_lr, report = grid_search_lr(ModelConfig("mlp"), kg, features, labels, [0.1, 0.01, 0.05], folds=2)
        self.assertEqual(0.01, best_lr)
        self.assertEqual({"0.01": 0.2, "0.05": 0.2, "0.1": 0.3}, report.grid)

    @mock.patch("lenie.evalcore.crossval.cross_validate")
    def test_all_rates_fail(self, mock_cross_validate):
        kg, features, labels = line_dataset(10, 1.0, seed=1)
        mock_cross_validate.return_value = {0: ModelTrainingError("diverged"), 1: ModelTrainingError("diverged")}
        with self.assertRaises(GridSearchError):
            grid_search_lr(ModelConfig("mlp"), kg, features, labels, [0.1, 0.5], folds=2)

    def test_empty_grid(self):
        kg, features, labels = line_dataset(10, 1.0, seed=1)
        with self.assertRaises(GridSearchError):
            grid_search_lr(ModelConfig("linreg"), kg, features, labels, [], folds=2)

    def test_topology_model_single_run(self):
        kg, _, labels = line_dataset(12, 1.0, seed=3)
        best_lr, report = grid_search_lr(ModelConfig("pagerank"), kg, None, labels, DEFAULT_LR_GRID, folds=3, k=4)
        self.assertIsNone(best_lr)
        self.assertEqual({}, report.grid)
        self.assertEqual(3, len(report.folds))

    def test_thread_count_does_not_change_result(self):
        kg, features, labels = line_dataset(20, 1.0, seed=6)
        config = ModelConfig("mlp", hidden_dim=4, epochs=20, seed=3)
        _, sequential = grid_search_lr(config, kg, features, labels, [0.1, 0.01], folds=4, thread_count=1)
        _, threaded = grid_search_lr(config, kg, features, labels, [0.1, 0.01], folds=4, thread_count=4)
        self.assertEqual(sequential, threaded)
        self.assertEqual(sequential.predictions, threaded.predictions)

    def test_cross_validate_reports_failure(self):
        kg, features, labels = line_dataset(12, 1.0, seed=2)
        splits = kfold_split([label.node for label in labels], 3, seed=0)
        outcome = cross_validate(kg, features, labels, [ModelConfig("linreg")], splits)
        self.assertIsInstance(outcome[0], Exception)


if __name__ == '__main__':
    unittest.main()
