import logging
from typing import Iterable, Optional

import numpy as np
from scipy import sparse

from lenie.kgcore.graph import KnowledgeGraph
from lenie.niecore.models import Prediction, ModelConfigError, FLAG_NOT_CONVERGED

logger = logging.getLogger(__name__)


def transition_matrix(kg: KnowledgeGraph) -> sparse.csr_matrix:
    """
    Row-stochastic head->tail matrix, duplicate triplets add weight. Dangling rows stay zero
    """
    n = kg.num_entities
    if not kg.triplets:
        return sparse.csr_matrix((n, n), dtype=np.float64)
    heads = np.fromiter((t.head for t in kg.triplets), dtype=np.int64, count=len(kg.triplets))
    tails = np.fromiter((t.tail for t in kg.triplets), dtype=np.int64, count=len(kg.triplets))
    weights = sparse.csr_matrix((np.ones(len(heads)), (heads, tails)), shape=(n, n), dtype=np.float64)
    out_weight = np.asarray(weights.sum(axis=1)).ravel()
    scale = np.divide(1.0, out_weight, out=np.zeros(n), where=out_weight > 0)
    return sparse.diags(scale) @ weights


def power_iteration(transition: sparse.csr_matrix, teleport: np.ndarray, damping: float, tol: float,
                    max_iters: int):
    """
    x <- d * (P^T x + dangling(x) * teleport) + (1 - d) * teleport
    :return: (scores, converged, iterations)
    """
    dangling = np.asarray(transition.sum(axis=1)).ravel() == 0
    transposed = transition.T.tocsr()
    scores = teleport.copy()
    for iteration in range(1, max_iters + 1):
        dangling_mass = scores[dangling].sum()
        updated = damping * (transposed @ scores + dangling_mass * teleport) + (1.0 - damping) * teleport
        change = np.abs(updated - scores).sum()
        scores = updated
        if change < tol:
            return scores / scores.sum(), True, iteration
    return scores / scores.sum(), False, max_iters


def pagerank(kg: KnowledgeGraph, damping: float = 0.85, tol: float = 1e-9, max_iters: int = 200) -> Prediction:
    """
    Power-iteration PageRank over directed head->tail edges with uniform teleport
    :return: scores for all nodes summing to 1, flagged when not converged
    :raises ModelConfigError
    """
    n = kg.num_entities
    if n == 0:
        raise ModelConfigError("PageRank requires non-empty graph")
    return _rank(kg, np.full(n, 1.0 / n), damping, tol, max_iters, "PageRank")


def personalized_pagerank(kg: KnowledgeGraph, restart_set: Optional[Iterable[int]] = None,
                          damping: float = 0.85, tol: float = 1e-9, max_iters: int = 200) -> Prediction:
    """
    PageRank teleporting uniformly over restart set
    :param restart_set: restart nodes, labeled nodes when None
    :raises ModelConfigError
    """
    n = kg.num_entities
    if n == 0:
        raise ModelConfigError("Personalized PageRank requires non-empty graph")
    restart = sorted(set(kg.labeled_ids() if restart_set is None else restart_set))
    if not restart:
        raise ModelConfigError("Personalized PageRank restart set is empty")
    if restart[0] < 0 or restart[-1] >= n:
        raise ModelConfigError(f"Restart set references nodes outside 0..{n - 1}")
    teleport = np.zeros(n)
    teleport[restart] = 1.0 / len(restart)
    return _rank(kg, teleport, damping, tol, max_iters, "Personalized PageRank")


def _rank(kg: KnowledgeGraph, teleport: np.ndarray, damping: float, tol: float, max_iters: int,
          name: str) -> Prediction:
    scores, converged, iterations = power_iteration(transition_matrix(kg), teleport, damping, tol, max_iters)
    flags = {}
    if not converged:
        logger.warning(f"{name} did not converge within {max_iters} iterations")
        flags[FLAG_NOT_CONVERGED] = True
    else:
        logger.debug(f"{name} converged after {iterations} iterations")
    return Prediction(list(range(kg.num_entities)), scores, flags)
