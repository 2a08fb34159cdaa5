import logging
import math
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from lenie.evalcore.metrics import MetricReport, MetricContractError, EvaluationError, evaluate_predictions, \
    DEFAULT_K
from lenie.evalcore.report import ExperimentReport
from lenie.kgcore.graph import KnowledgeGraph
from lenie.kgcore.labels import ImportanceLabel
from lenie.niecore.models import ModelConfig, NodeFeatureTable, ModelError
from lenie.niecore.train import train_model, predict_scores

logger = logging.getLogger(__name__)

DEFAULT_FOLDS = 5
DEFAULT_LR_GRID = [0.1, 0.5, 0.01, 0.05, 0.001, 0.005, 0.0001, 0.0005]


class FoldSplit:
    def __init__(self, index: int, train: List[int], test: List[int]):
        """
        :param index: fold index
        :param train: training node ids
        :param test: held-out node ids
        """
        self.index = index
        self.train = train
        self.test = test

    def __eq__(self, other):
        return isinstance(other, FoldSplit) and \
            (self.index, self.train, self.test) == (other.index, other.train, other.test)

    def __repr__(self):
        return f"FoldSplit({self.index}, train={len(self.train)}, test={len(self.test)})"


def kfold_split(node_ids: List[int], folds: int, seed: int) -> List[FoldSplit]:
    """
    Seeded shuffle, then permutation position i goes to fold i mod folds
    :raises FoldConfigError
    """
    if not isinstance(folds, int) or folds < 2:
        raise FoldConfigError(f"Incorrect fold count '{folds}'. Should be integer >= 2")
    if len(node_ids) < folds:
        raise FoldConfigError(f"Cannot split {len(node_ids)} nodes into {folds} folds")
    if len(set(node_ids)) != len(node_ids):
        raise FoldConfigError("Node ids for cross-validation are not unique")
    permutation = np.random.default_rng(seed).permutation(len(node_ids))
    assigned = [[] for _ in range(folds)]
    for position, index in enumerate(permutation):
        assigned[position % folds].append(node_ids[int(index)])
    splits = []
    for fold in range(folds):
        test = sorted(assigned[fold])
        held_out = set(test)
        splits.append(FoldSplit(fold, [node for node in node_ids if node not in held_out], test))
    return splits


def run_fold(kg: KnowledgeGraph, features: Optional[NodeFeatureTable], labels: List[ImportanceLabel],
             config: ModelConfig, split: FoldSplit, k: int) -> Tuple[MetricReport, Dict[int, float]]:
    """
    Trains on fold's training nodes and evaluates on its test nodes
    :return: test metrics and test predictions
    """
    by_node = {label.node: label for label in labels}
    model = train_model(kg, features, [by_node[node] for node in split.train], config)
    prediction = predict_scores(model, kg, features, split.test)
    truth = [by_node[node].value for node in split.test]
    report = evaluate_predictions(prediction.scores, truth, k)
    return report, prediction.as_dict()


def cross_validate(kg: KnowledgeGraph, features: Optional[NodeFeatureTable], labels: List[ImportanceLabel],
                   configs: List[ModelConfig], splits: List[FoldSplit], k: int = DEFAULT_K,
                   thread_count: int = 1) -> Dict[int, Any]:
    """
    Runs every (config, fold) cell, possibly concurrently
    :return: per config index, list of (MetricReport, predictions) ordered by fold, or the exception that failed it
    """
    results: Dict[Tuple[int, int], Any] = {}
    with ThreadPoolExecutor(max_workers=max(1, thread_count)) as executor:
        futures = []
        for config_index, config in enumerate(configs):
            for split in splits:
                future = executor.submit(run_fold, kg, features, labels, config, split, k)
                future.cell = (config_index, split.index)
                futures.append(future)
        for future in as_completed(futures):
            try:
                results[future.cell] = future.result()
            except (ModelError, MetricContractError) as e:
                results[future.cell] = e
    outcome = {}
    for config_index in range(len(configs)):
        cells = [results[(config_index, split.index)] for split in splits]
        failures = [cell for cell in cells if isinstance(cell, Exception)]
        outcome[config_index] = failures[0] if failures else cells
    return outcome


def grid_search_lr(config: ModelConfig, kg: KnowledgeGraph, features: Optional[NodeFeatureTable],
                   labels: List[ImportanceLabel], grid: List[float], folds: int = DEFAULT_FOLDS, seed: int = 0,
                   k: int = DEFAULT_K, thread_count: int = 1, arm: str = "-",
                   config_echo: Optional[Dict[str, Any]] = None) -> Tuple[Optional[float], ExperimentReport]:
    """
    Cross-validates every learning rate and keeps the one with lowest mean test RMSE, ties to smaller rate.
    Topology models need no learning rate and are cross-validated once
    :return: best learning rate (None for topology models) and its report
    :raises GridSearchError, FoldConfigError
    """
    if not grid and not config.is_topology:
        raise GridSearchError("Learning rate grid is empty")
    splits = kfold_split([label.node for label in labels], folds, seed)
    rates: List[Optional[float]] = [None] if config.is_topology else sorted(set(float(lr) for lr in grid))
    candidates = [config if lr is None else config.with_learning_rate(lr) for lr in rates]
    outcome = cross_validate(kg, features, labels, candidates, splits, k, thread_count)

    grid_column: Dict[str, Optional[float]] = {}
    scored = []
    failures = {}
    for index, lr in enumerate(rates):
        cells = outcome[index]
        if isinstance(cells, Exception):
            logger.warning(f"Learning rate {lr} failed for '{config.kind}'\n{cells}")
            failures[lr] = str(cells)
            if lr is not None:
                grid_column[repr(lr)] = None
            continue
        mean_rmse = float(np.mean([report.rmse for report, _ in cells]))
        if lr is not None:
            grid_column[repr(lr)] = mean_rmse
        if math.isfinite(mean_rmse):
            scored.append((mean_rmse, -1.0 if lr is None else lr, index))
    if not scored:
        raise GridSearchError(f"All runs of '{config.kind}' failed: {failures}")
    _, _, best = min(scored)
    best_lr = rates[best]
    cells = outcome[best]
    report = ExperimentReport(arm=arm, model=config.kind, seed=seed, learning_rate=best_lr,
                              folds=[fold_report for fold_report, _ in cells], config=config_echo,
                              grid=grid_column)
    for _, predictions in cells:
        report.predictions.update(predictions)
    logger.info(f"Selected learning rate {best_lr} for '{config.kind}' on arm '{arm}', "
                f"mean RMSE {report.aggregate()['rmse']['mean']:.4f}")
    return best_lr, report


class FoldConfigError(EvaluationError):
    pass


class GridSearchError(EvaluationError):
    pass
