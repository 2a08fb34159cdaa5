import logging
import math
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

RMSE = "rmse"
MEDIAN_AE = "median_ae"
NDCG = "ndcg_at_k"
SPEARMAN = "spearman"
OVERLAP = "overlap_at_k"
METRIC_NAMES = [RMSE, MEDIAN_AE, NDCG, SPEARMAN, OVERLAP]

DEFAULT_K = 100


class MetricReport:
    def __init__(self, rmse: float, median_ae: float, ndcg_at_k: float, spearman: float, overlap_at_k: float,
                 k: int = DEFAULT_K):
        self.rmse = rmse
        self.median_ae = median_ae
        self.ndcg_at_k = ndcg_at_k
        self.spearman = spearman
        self.overlap_at_k = overlap_at_k
        self.k = k

    def as_dict(self) -> Dict[str, Any]:
        return {
            RMSE: self.rmse,
            MEDIAN_AE: self.median_ae,
            NDCG: self.ndcg_at_k,
            SPEARMAN: self.spearman,
            OVERLAP: self.overlap_at_k,
            "k": self.k,
        }

    def __eq__(self, other):
        return isinstance(other, MetricReport) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"MetricReport(rmse={self.rmse:.4f}, spearman={self.spearman:.4f})"


def _arrays(pred: Sequence[float], truth: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.ndim != 1 or t.ndim != 1 or p.shape != t.shape:
        raise MetricContractError(f"Prediction and truth should be equal-length lists, "
                                  f"are {p.shape} and {t.shape}")
    if p.shape[0] == 0:
        raise MetricContractError("Prediction and truth lists are empty")
    if not np.all(np.isfinite(p)) or not np.all(np.isfinite(t)):
        raise MetricContractError("Prediction and truth should hold finite values")
    return p, t


def _check_k(k: int) -> None:
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise MetricContractError(f"Incorrect cutoff k '{k}'. Should be integer >= 1")


def rank_order(values: np.ndarray) -> np.ndarray:
    """
    Indices by value descending, ties to lower index
    """
    return np.argsort(-values, kind="stable")


def rmse(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _arrays(pred, truth)
    return math.sqrt(float(np.mean((p - t) ** 2)))


def median_ae(pred: Sequence[float], truth: Sequence[float]) -> float:
    p, t = _arrays(pred, truth)
    return float(np.median(np.abs(p - t)))


def ndcg_at_k(pred: Sequence[float], truth: Sequence[float], k: int = DEFAULT_K) -> float:
    """
    Linear-gain NDCG: gain is raw truth value, discount log2(position + 1)
    :raises MetricDomainError
    """
    p, t = _arrays(pred, truth)
    _check_k(k)
    if np.any(t < 0):
        raise MetricDomainError("NDCG requires non-negative truth values")
    cutoff = min(k, t.shape[0])
    discounts = 1.0 / np.log2(np.arange(2, cutoff + 2))
    ideal = float(np.sum(t[rank_order(t)[:cutoff]] * discounts))
    if ideal == 0:
        return 1.0
    return float(np.sum(t[rank_order(p)[:cutoff]] * discounts)) / ideal


def spearman_corr(pred: Sequence[float], truth: Sequence[float]) -> float:
    """
    Pearson correlation of average ranks
    :raises MetricUndefinedError
    """
    p, t = _arrays(pred, truth)
    if p.shape[0] < 2:
        raise MetricUndefinedError("Spearman correlation needs at least 2 items")
    rp = rankdata(p, method="average") - (p.shape[0] + 1) / 2.0
    rt = rankdata(t, method="average") - (t.shape[0] + 1) / 2.0
    denominator = math.sqrt(float(np.sum(rp * rp)) * float(np.sum(rt * rt)))
    if denominator == 0:
        raise MetricUndefinedError("Spearman correlation is undefined for constant rankings")
    return max(-1.0, min(1.0, float(np.sum(rp * rt)) / denominator))


def overlap_at_k(pred: Sequence[float], truth: Sequence[float], k: int = DEFAULT_K) -> float:
    p, t = _arrays(pred, truth)
    _check_k(k)
    cutoff = min(k, p.shape[0])
    common = set(rank_order(p)[:cutoff].tolist()) & set(rank_order(t)[:cutoff].tolist())
    return len(common) / cutoff


def evaluate_predictions(pred: Sequence[float], truth: Sequence[float], k: int = DEFAULT_K) -> MetricReport:
    """
    Computes all five metrics. Negative truth values are clipped to zero for NDCG only,
    undefined Spearman correlation (constant ranking) is reported as 0.0
    :raises EvaluationError
    """
    p, t = _arrays(pred, truth)
    try:
        spearman = spearman_corr(p, t)
    except MetricUndefinedError as e:
        logger.warning(f"{e}, reporting 0.0")
        spearman = 0.0
    return MetricReport(rmse=rmse(p, t),
                        median_ae=median_ae(p, t),
                        ndcg_at_k=ndcg_at_k(p, np.maximum(t, 0.0), k),
                        spearman=spearman,
                        overlap_at_k=overlap_at_k(p, t, k),
                        k=k)


def aggregate(values: List[float]) -> Dict[str, float]:
    """
    :return: mean and population standard deviation
    """
    array = np.asarray(values, dtype=np.float64)
    return {"mean": float(np.mean(array)), "std": float(np.std(array))}


class EvaluationError(Exception):
    pass


class MetricContractError(EvaluationError):
    pass


class MetricDomainError(EvaluationError):
    pass


class MetricUndefinedError(EvaluationError):
    pass
