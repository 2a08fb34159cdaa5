import logging
import math
from typing import List

from lenie.kgcore.graph import KnowledgeGraph, KgError

logger = logging.getLogger(__name__)


class ImportanceLabel:
    """
    Log-transformed importance label of interested node
    """

    def __init__(self, node: int, value: float):
        """
        :param node: entity id
        :param value: ln(1 + raw_score)
        """
        self.node = node
        self.value = value

    def __eq__(self, other):
        return self.node == other.node and self.value == other.value

    def __repr__(self):
        return f"ImportanceLabel({self.node}, {self.value})"


def log_transform(raw_score: float) -> float:
    """
    Natural-log label transform ln(1 + s), defined for zero scores
    :param raw_score: non-negative finite importance score
    :raises KgDomainError
    """
    try:
        value = float(raw_score)
    except (TypeError, ValueError) as e:
        raise KgDomainError(f"Incorrect raw score '{raw_score}'") from e
    if not math.isfinite(value) or value < 0:
        raise KgDomainError(f"Raw score should be finite and non-negative, is '{raw_score}'")
    return math.log1p(value)


def importance_labels(kg: KnowledgeGraph) -> List[ImportanceLabel]:
    """
    Builds labels for every entity carrying raw score
    :param kg: loaded knowledge graph
    :return: labels in ascending entity id order
    """
    return [ImportanceLabel(entity.id, log_transform(entity.raw_score))
            for entity in kg.entities if entity.is_labeled]


class KgDomainError(KgError):
    pass
