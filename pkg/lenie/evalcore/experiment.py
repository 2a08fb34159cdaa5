import logging
import time
from typing import Any, Dict, List, Optional

from lenie.embedcore.cache import EmbeddingCache, cache_get_or_encode
from lenie.embedcore.encoder import TextEncoderConfig, encode_texts
from lenie.evalcore.crossval import grid_search_lr, FoldConfigError, DEFAULT_FOLDS, DEFAULT_LR_GRID
from lenie.evalcore.metrics import EvaluationError, DEFAULT_K
from lenie.evalcore.report import ExperimentReport, write_report
from lenie.kgcore.graph import KnowledgeGraph
from lenie.kgcore.labels import importance_labels
from lenie.llmcore.augment import AugmentationStore, node_prompt
from lenie.llmcore.prompt import PromptTemplate, LlmError
from lenie.niecore.models import ModelConfig, NodeFeatureTable
from lenie.samplecore.sampler import SampledContext, STRATEGY_RANDOM, STRATEGY_CLUSTER

logger = logging.getLogger(__name__)

ARM_NAME_ONLY = "name_only"
ARM_ORIGINAL_DESC = "original_desc"
ARM_CONCAT = "concat"
ARM_AUGMENTED_RANDOM = "augmented_random"
ARM_AUGMENTED_CLUSTER = "augmented_cluster"
ARMS = [ARM_NAME_ONLY, ARM_ORIGINAL_DESC, ARM_CONCAT, ARM_AUGMENTED_RANDOM, ARM_AUGMENTED_CLUSTER]
AUGMENTED_ARMS = {
    ARM_AUGMENTED_RANDOM: STRATEGY_RANDOM,
    ARM_AUGMENTED_CLUSTER: STRATEGY_CLUSTER,
}

# Config keys
FOLDS = "folds"
K = "k"
LR_GRID = "lr_grid"
ARMS_KEY = "arms"
EVALUATION_KEYS = [FOLDS, K, LR_GRID, ARMS_KEY]


class EvaluationConfig:
    def __init__(self, folds: int = DEFAULT_FOLDS, k: int = DEFAULT_K,
                 lr_grid: Optional[List[float]] = None, arms: Optional[List[str]] = None):
        """
        :param folds: cross-validation folds
        :param k: cutoff of ranking metrics
        :param lr_grid: learning rates searched
        :param arms: feature sources compared
        :raises FoldConfigError
        """
        if not isinstance(folds, int) or isinstance(folds, bool) or folds < 2:
            raise FoldConfigError(f"Incorrect '{FOLDS}' value '{folds}'. Should be integer >= 2")
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            raise FoldConfigError(f"Incorrect '{K}' value '{k}'. Should be integer >= 1")
        lr_grid = list(DEFAULT_LR_GRID if lr_grid is None else lr_grid)
        if not lr_grid or any(not isinstance(lr, (int, float)) or isinstance(lr, bool) or not lr > 0
                              for lr in lr_grid):
            raise FoldConfigError(f"Incorrect '{LR_GRID}' value '{lr_grid}'. Should be non-empty positive list")
        arms = list(ARMS if arms is None else arms)
        for arm in arms:
            if arm not in ARMS:
                raise FoldConfigError(f"Unknown arm '{arm}'. Should be one of {ARMS}")
        if not arms:
            raise FoldConfigError(f"'{ARMS_KEY}' should not be empty")
        self.folds = folds
        self.k = k
        self.lr_grid = [float(lr) for lr in lr_grid]
        self.arms = arms

    def as_dict(self) -> Dict[str, Any]:
        return {FOLDS: self.folds, K: self.k, LR_GRID: self.lr_grid, ARMS_KEY: self.arms}

    def __eq__(self, other):
        return isinstance(other, EvaluationConfig) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"EvaluationConfig(folds={self.folds}, k={self.k}, arms={self.arms})"


def configure_evaluation(config: Optional[Dict[str, Any]]) -> EvaluationConfig:
    """
    :raises FoldConfigError
    """
    if config is None:
        return EvaluationConfig()
    if not isinstance(config, dict):
        raise FoldConfigError(f"Incorrect evaluation configuration type. Should be dict, is {type(config)}")
    for key in config:
        if key not in EVALUATION_KEYS:
            raise FoldConfigError(f"Unknown key '{key}' in evaluation configuration")
    return EvaluationConfig(folds=config.get(FOLDS, DEFAULT_FOLDS),
                            k=config.get(K, DEFAULT_K),
                            lr_grid=config.get(LR_GRID),
                            arms=config.get(ARMS_KEY))


def build_arm_texts(kg: KnowledgeGraph, arm: str,
                    contexts: Optional[Dict[int, SampledContext]] = None,
                    store: Optional[AugmentationStore] = None,
                    template: Optional[PromptTemplate] = None,
                    backend_id: Optional[str] = None) -> List[str]:
    """
    Node text per entity in id order. Unlabeled entities keep description (or name),
    name_only uses names everywhere
    :param kg: knowledge graph
    :param arm: feature source
    :param contexts: sampled contexts of labeled nodes, needed by concat and augmented arms
    :param store: augmentation store, needed by augmented arms
    :param template: prompt template the store was generated with
    :param backend_id: backend the store was generated with
    :raises PipelineError
    """
    if arm not in ARMS:
        raise PipelineError(f"Unknown arm '{arm}'. Should be one of {ARMS}")
    if arm == ARM_NAME_ONLY:
        return [entity.name for entity in kg.entities]
    texts = [entity.description_or_name() for entity in kg.entities]
    if arm == ARM_ORIGINAL_DESC:
        return texts
    if contexts is None:
        raise PipelineError(f"Arm '{arm}' requires sampled contexts, run 'sample' stage first")
    if arm in AUGMENTED_ARMS and (store is None or template is None or backend_id is None):
        raise PipelineError(f"Arm '{arm}' requires augmentation store, run 'augment' stage first")
    fallbacks = 0
    for node in kg.labeled_ids():
        context = contexts.get(node)
        if context is None:
            raise PipelineError(f"No sampled context for node {node}, run 'sample' stage first")
        if arm == ARM_CONCAT:
            if context.sentences:
                texts[node] = f"{texts[node]} {' '.join(context.sentences)}"
            continue
        try:
            stored = store.get(node, node_prompt(kg, template, context).prompt_hash, backend_id)
        except LlmError as e:
            logger.debug(f"No prompt for node {node}\n{e}")
            stored = None
        if stored is None:
            fallbacks += 1
        else:
            texts[node] = stored.text
    if fallbacks:
        logger.warning(f"Arm '{arm}': {fallbacks} nodes without generated description fall back to original "
                       f"description")
    return texts


def build_arm_features(texts: List[str], encoder: TextEncoderConfig,
                       cache: Optional[EmbeddingCache] = None) -> NodeFeatureTable:
    """
    Encodes node texts into initial features, row i for entity i
    """
    if cache is not None:
        matrix = cache_get_or_encode(cache, encoder, texts)
    else:
        matrix = encode_texts(encoder, texts)
    return NodeFeatureTable(list(range(len(texts))), matrix)


def run_experiment(kg: KnowledgeGraph, arm: str, model: ModelConfig, encoder: TextEncoderConfig,
                   evaluation: EvaluationConfig, seed: int, output_dir: str,
                   contexts: Optional[Dict[int, SampledContext]] = None,
                   store: Optional[AugmentationStore] = None,
                   template: Optional[PromptTemplate] = None,
                   backend_id: Optional[str] = None,
                   cache: Optional[EmbeddingCache] = None,
                   thread_count: int = 1,
                   config_echo: Optional[Dict[str, Any]] = None) -> ExperimentReport:
    """
    Assembles arm texts, encodes features, grid-searches learning rate and writes report
    :raises EvaluationError
    """
    timings = {}
    started = time.time()
    features = None
    if not model.is_topology:
        texts = build_arm_texts(kg, arm, contexts, store, template, backend_id)
        features = build_arm_features(texts, encoder, cache)
    timings["features"] = time.time() - started
    started = time.time()
    _, report = grid_search_lr(model, kg, features, importance_labels(kg), evaluation.lr_grid,
                               folds=evaluation.folds, seed=seed, k=evaluation.k, thread_count=thread_count,
                               arm=arm, config_echo=config_echo)
    timings["grid_search"] = time.time() - started
    report.timings = timings
    write_report(report, output_dir)
    return report


class PipelineError(EvaluationError):
    pass
