import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from lenie.embedcore.cache import EmbeddingCache, cache_get_or_encode
from lenie.embedcore.encoder import TextEncoderConfig, encode_texts
from lenie.embedcore.matrix import EmbeddingMatrix
from lenie.kgcore.graph import KnowledgeGraph
from lenie.kgcore.sentence import triplet_to_sentence
from lenie.samplecore.kmeans import ClusterResult, kmeans_fit, squared_distances, SamplerConfigError, \
    DEFAULT_MAX_ITERS, DEFAULT_TOL

logger = logging.getLogger(__name__)

# Config keys
STRATEGY = "strategy"
K = "k"
SEED = "seed"
KMEANS_MAX_ITERS = "kmeans_max_iters"
KMEANS_TOL = "kmeans_tol"
SAMPLER_KEYS = [STRATEGY, K, SEED, KMEANS_MAX_ITERS, KMEANS_TOL]

STRATEGY_RANDOM = "random"
STRATEGY_CLUSTER = "cluster"
STRATEGIES = [STRATEGY_RANDOM, STRATEGY_CLUSTER]

SEED_MASK = (1 << 64) - 1

# Sample record keys
RECORD_NODE = "node"
RECORD_STRATEGY = "strategy"
RECORD_K = "k"
RECORD_SENTENCES = "sentences"
RECORD_TRIPLETS = "triplets"


class SamplerConfig:
    """
    Triplet sampling strategy and its parameters
    """

    def __init__(self, strategy: str, k: int, seed: int,
                 kmeans_max_iters: int = DEFAULT_MAX_ITERS,
                 kmeans_tol: float = DEFAULT_TOL):
        """
        :param strategy: random or cluster
        :param k: sentences kept per node
        :param seed: 64-bit unsigned global seed
        :param kmeans_max_iters: Lloyd iteration cap
        :param kmeans_tol: Lloyd convergence threshold
        :raises SamplerConfigError
        """
        if strategy not in STRATEGIES:
            raise SamplerConfigError(f"Unknown sampling strategy '{strategy}'. Should be one of {STRATEGIES}")
        if not isinstance(k, int) or isinstance(k, bool) or k < 1:
            raise SamplerConfigError(f"Incorrect sample size k '{k}'. Should be integer >= 1")
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0 or seed > SEED_MASK:
            raise SamplerConfigError(f"Incorrect seed '{seed}'. Should be 64-bit unsigned integer")
        if not isinstance(kmeans_max_iters, int) or kmeans_max_iters < 1:
            raise SamplerConfigError(f"Incorrect '{KMEANS_MAX_ITERS}' value '{kmeans_max_iters}'")
        if not isinstance(kmeans_tol, (int, float)) or not kmeans_tol > 0:
            raise SamplerConfigError(f"Incorrect '{KMEANS_TOL}' value '{kmeans_tol}'")
        self.strategy = strategy
        self.k = k
        self.seed = seed
        self.kmeans_max_iters = kmeans_max_iters
        self.kmeans_tol = float(kmeans_tol)

    def node_seed(self, node: int) -> int:
        return (self.seed ^ node) & SEED_MASK

    def with_strategy(self, strategy: str) -> "SamplerConfig":
        return SamplerConfig(strategy, self.k, self.seed, self.kmeans_max_iters, self.kmeans_tol)

    def as_dict(self) -> Dict[str, Any]:
        return {
            STRATEGY: self.strategy,
            K: self.k,
            SEED: self.seed,
            KMEANS_MAX_ITERS: self.kmeans_max_iters,
            KMEANS_TOL: self.kmeans_tol,
        }

    def __eq__(self, other):
        return isinstance(other, SamplerConfig) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"SamplerConfig({self.strategy}, k={self.k}, seed={self.seed})"


class SampledContext:
    """
    Sentences kept for one node
    """

    def __init__(self, node: int, sentences: List[str], strategy: str, k_requested: int,
                 triplets: Optional[List[int]] = None):
        """
        :param node: entity id
        :param sentences: kept sentences in original order
        :param strategy: strategy that produced them
        :param k_requested: configured k
        :param triplets: per sentence, index of first triplet rendering it
        """
        self.node = node
        self.sentences = sentences
        self.strategy = strategy
        self.k_requested = k_requested
        self.triplets = triplets if triplets is not None else []

    def to_record(self) -> Dict[str, Any]:
        return {
            RECORD_NODE: self.node,
            RECORD_STRATEGY: self.strategy,
            RECORD_K: self.k_requested,
            RECORD_SENTENCES: self.sentences,
            RECORD_TRIPLETS: self.triplets,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "SampledContext":
        try:
            return cls(node=int(record[RECORD_NODE]),
                       sentences=list(record[RECORD_SENTENCES]),
                       strategy=record[RECORD_STRATEGY],
                       k_requested=int(record[RECORD_K]),
                       triplets=list(record.get(RECORD_TRIPLETS, [])))
        except (KeyError, TypeError, ValueError) as e:
            raise SamplerConfigError(f"Incorrect sample record '{record}'") from e

    def __eq__(self, other):
        return isinstance(other, SampledContext) and self.to_record() == other.to_record()

    def __repr__(self):
        return f"SampledContext(node={self.node}, {self.strategy}, {len(self.sentences)}/{self.k_requested})"


def node_sentences(kg: KnowledgeGraph, node: int) -> Tuple[List[str], List[int]]:
    """
    Renders node's incident triplets as sentences, dropping repeats
    :return: distinct sentences in first-occurrence order and the triplet index each came from
    """
    sentences = []
    sources = []
    seen = set()
    for index in kg.incidence[kg.entity(node).id]:
        sentence = triplet_to_sentence(kg, kg.triplets[index])
        if sentence in seen:
            continue
        seen.add(sentence)
        sentences.append(sentence)
        sources.append(index)
    return sentences, sources


def sample_random(sentences: List[str], k: int, seed: int) -> List[str]:
    """
    Uniform sampling without replacement, keeping original relative order
    :param sentences: distinct sentences
    :param k: sample size
    :param seed: generator seed
    :raises SamplerConfigError
    """
    return [sentences[index] for index in _random_indices(len(sentences), k, seed)]


def _random_indices(count: int, k: int, seed: int) -> List[int]:
    if k < 1:
        raise SamplerConfigError(f"Incorrect sample size k '{k}'. Should be integer >= 1")
    if count <= k:
        return list(range(count))
    rng = np.random.default_rng(seed)
    return sorted(int(index) for index in rng.choice(count, size=k, replace=False))


def select_nearest_sentences(sentences: List[str], embeddings: EmbeddingMatrix, result: ClusterResult) -> List[str]:
    """
    Picks sentence closest to every cluster center, ties to lowest index
    :return: distinct picks in original sentence order
    """
    return [sentences[index] for index in _nearest_indices(embeddings, result)]


def _nearest_indices(embeddings: EmbeddingMatrix, result: ClusterResult) -> List[int]:
    distances = squared_distances(np.asarray(embeddings.data, dtype=np.float64), result.centers)
    return sorted(set(int(index) for index in np.argmin(distances, axis=0)))


def sample_triplets(kg: KnowledgeGraph, node: int, encoder: TextEncoderConfig, config: SamplerConfig,
                    cache: Optional[EmbeddingCache] = None) -> SampledContext:
    """
    Extracts, renders, deduplicates and samples node's triplet sentences
    :param kg: knowledge graph
    :param node: entity id
    :param encoder: sentence encoder used by cluster strategy
    :param config: sampler configuration
    :param cache: optional embedding cache for sentence vectors
    :return: context with min(k, distinct sentence count) sentences
    """
    sentences, sources = node_sentences(kg, node)
    seed = config.node_seed(node)
    if config.strategy == STRATEGY_RANDOM or len(sentences) <= config.k:
        chosen = _random_indices(len(sentences), config.k, seed)
    else:
        if cache is not None:
            embeddings = cache_get_or_encode(cache, encoder, sentences)
        else:
            embeddings = encode_texts(encoder, sentences)
        result = kmeans_fit(embeddings, config.k, seed, config.kmeans_max_iters, config.kmeans_tol)
        chosen = _nearest_indices(embeddings, result)
        if len(chosen) < config.k:
            logger.debug(f"Clustering of node {node} picked {len(chosen)} of {config.k} sentences, topping up")
            picked = set(chosen)
            extra = [index for index in range(len(sentences)) if index not in picked]
            chosen = sorted(chosen + extra[:config.k - len(chosen)])
    return SampledContext(node=node,
                          sentences=[sentences[index] for index in chosen],
                          strategy=config.strategy,
                          k_requested=config.k,
                          triplets=[sources[index] for index in chosen])


def sample_nodes(kg: KnowledgeGraph, nodes: List[int], encoder: TextEncoderConfig, config: SamplerConfig,
                 thread_count: int = 1, cache: Optional[EmbeddingCache] = None) -> List[SampledContext]:
    """
    Samples many nodes concurrently
    :return: contexts in the order of nodes
    """
    contexts: List[Optional[SampledContext]] = [None] * len(nodes)
    with ThreadPoolExecutor(max_workers=max(1, thread_count)) as executor:
        futures = []
        for position, node in enumerate(nodes):
            future = executor.submit(sample_triplets, kg, node, encoder, config, cache)
            future.position = position
            futures.append(future)
        for future in as_completed(futures):
            contexts[future.position] = future.result()
    logger.info(f"Sampled {len(nodes)} nodes with '{config.strategy}' strategy, k={config.k}")
    return contexts


def relation_coverage(kg: KnowledgeGraph, context: SampledContext) -> Tuple[int, int]:
    """
    :return: (distinct relations among sampled triplets, distinct relations incident to node)
    """
    covered = {kg.triplets[index].relation for index in context.triplets}
    available = {kg.triplets[index].relation for index in kg.incidence[context.node]}
    return len(covered), len(available)


def configure_sampler(config: Optional[Dict[str, Any]], default_k: Optional[int], seed: int) -> SamplerConfig:
    """
    Builds sampler configuration from config file section
    :param config: sampler section
    :param default_k: dataset default sample size used when k is missing
    :param seed: global seed used when section has none
    :raises SamplerConfigError
    """
    if config is None:
        config = {}
    if not isinstance(config, dict):
        raise SamplerConfigError(f"Incorrect sampler configuration type. Should be dict, is {type(config)}")
    for key in config:
        if key not in SAMPLER_KEYS:
            raise SamplerConfigError(f"Unknown key '{key}' in sampler configuration")
    k = config.get(K, default_k)
    if k is None:
        raise SamplerConfigError(f"Missing '{K}' in sampler configuration and no dataset default")
    return SamplerConfig(strategy=config.get(STRATEGY, STRATEGY_CLUSTER),
                         k=k,
                         seed=config.get(SEED, seed),
                         kmeans_max_iters=config.get(KMEANS_MAX_ITERS, DEFAULT_MAX_ITERS),
                         kmeans_tol=config.get(KMEANS_TOL, DEFAULT_TOL))
