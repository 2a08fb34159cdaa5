import logging
import threading
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import sparse

from lenie.kgcore.graph import KnowledgeGraph
from lenie.kgcore.labels import ImportanceLabel
from lenie.niecore.models import ModelConfig, NodeFeatureTable, TrainedModel, Params, ModelConfigError, \
    gradient_descent, glorot_uniform, AGGREGATORS, AGGREGATOR_MEAN, HYPER, KIND_GNN, FLAG_UNKNOWN_RELATIONS

logger = logging.getLogger(__name__)

OUT_WEIGHTS = "w_out"
OUT_BIAS = "b_out"
SCALE = "scale"
COEF = "coef"

GRAM_MAX_NODES = 4096
INPUTS_CACHE_SIZE = 2


def self_weights(layer: int) -> str:
    return f"W_self{layer}"


def relation_weights(layer: int) -> str:
    return f"W_rel{layer}"


def layer_bias(layer: int) -> str:
    return f"b{layer}"


def relation_operators(kg: KnowledgeGraph, num_relations: int, aggregator: str) -> Tuple[List[sparse.csr_matrix], int]:
    """
    Per-relation neighbor aggregation matrices. Row i of operator r averages (or sums) over the set of
    nodes linked to i by relation r in either direction
    :param kg: knowledge graph
    :param num_relations: relations known to model, edges of other relations are skipped
    :param aggregator: mean or sum
    :return: operators and count of skipped triplets
    """
    n = kg.num_entities
    heads = {relation: [] for relation in range(num_relations)}
    tails = {relation: [] for relation in range(num_relations)}
    skipped = 0
    for t in kg.triplets:
        if t.relation >= num_relations:
            skipped += 1
            continue
        heads[t.relation].append(t.head)
        tails[t.relation].append(t.tail)
    operators = []
    for relation in range(num_relations):
        rows = np.asarray(heads[relation] + tails[relation], dtype=np.int64)
        cols = np.asarray(tails[relation] + heads[relation], dtype=np.int64)
        adjacency = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n), dtype=np.float64)
        # neighbor sets, multiplicity ignored
        adjacency.data[:] = 1.0
        if aggregator == AGGREGATOR_MEAN:
            degree = np.asarray(adjacency.sum(axis=1)).ravel()
            scale = np.divide(1.0, degree, out=np.zeros(n), where=degree > 0)
            adjacency = sparse.diags(scale) @ adjacency
        operators.append(adjacency.tocsr())
    return operators, skipped


def init_gnn(input_dim: int, config: ModelConfig, num_relations: int) -> Params:
    rng = np.random.default_rng(config.seed)
    hidden = config.hidden_dim
    params = {HYPER: np.array([config.layers, num_relations, AGGREGATORS.index(config.aggregator),
                               input_dim, hidden], dtype=np.float64)}
    for layer in range(config.layers):
        fan_in = input_dim if layer == 0 else hidden
        params[self_weights(layer)] = glorot_uniform(rng, fan_in, hidden, (fan_in, hidden))
        params[relation_weights(layer)] = glorot_uniform(rng, fan_in, hidden, (num_relations, fan_in, hidden))
        params[layer_bias(layer)] = np.zeros(hidden)
    params[OUT_WEIGHTS] = glorot_uniform(rng, hidden, 1, (hidden,))
    params[OUT_BIAS] = np.zeros(1)
    return params


class MessagePassingInputs:
    """
    Graph-dependent tensors shared by every model trained on same graph and features.
    First layer input is Z = [x, A_0 x, ..., A_R-1 x]. When Z is wider than tall, first layer
    weights stay in span of initial weights and rows of Z, and training runs on Gram matrix Z Z^T
    """

    def __init__(self, kg: KnowledgeGraph, features: NodeFeatureTable, num_relations: int, aggregator: str):
        self.kg = kg
        self.features = features
        self.num_relations = num_relations
        self.aggregator = aggregator
        self.operators, self.skipped = relation_operators(kg, num_relations, aggregator)
        self.x = features.dense(kg.num_entities)
        active = sum(1 for operator in self.operators if operator.nnz)
        num_nodes = self.x.shape[0]
        self.dual = num_nodes <= GRAM_MAX_NODES and num_nodes < (active + 1) * self.x.shape[1]
        self._gram: Optional[np.ndarray] = None
        self._lock = threading.Lock()

    def matches(self, kg: KnowledgeGraph, features: NodeFeatureTable, num_relations: int, aggregator: str) -> bool:
        return (self.kg is kg and self.features is features and self.num_relations == num_relations
                and self.aggregator == aggregator)

    @property
    def gram(self) -> np.ndarray:
        with self._lock:
            if self._gram is None:
                gram = self.x @ self.x.T
                for operator in self.operators:
                    if operator.nnz:
                        block = operator @ self.x
                        gram += block @ block.T
                self._gram = gram
                logger.debug(f"Computed {gram.shape[0]}x{gram.shape[0]} message passing Gram matrix")
        return self._gram

    def project(self, first_self: np.ndarray, first_rel: np.ndarray) -> np.ndarray:
        """
        :return: Z W for first layer weights W
        """
        result = self.x @ first_self
        for relation, operator in enumerate(self.operators):
            if operator.nnz:
                result += operator @ (self.x @ first_rel[relation])
        return result

    def expand(self, coef: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        :return: Z^T coef split into self block and per-relation blocks
        """
        first_rel = np.zeros((self.num_relations, self.x.shape[1], coef.shape[1]))
        for relation, operator in enumerate(self.operators):
            if operator.nnz:
                first_rel[relation] = self.x.T @ (operator.T @ coef)
        return self.x.T @ coef, first_rel


_inputs_cache: List[MessagePassingInputs] = []
_inputs_lock = threading.Lock()


def message_passing_inputs(kg: KnowledgeGraph, features: NodeFeatureTable, num_relations: int,
                           aggregator: str) -> MessagePassingInputs:
    """
    Returns shared inputs for graph and feature objects, building them on first use.
    Folds and grid cells of one experiment reuse them
    """
    with _inputs_lock:
        for inputs in _inputs_cache:
            if inputs.matches(kg, features, num_relations, aggregator):
                return inputs
        inputs = MessagePassingInputs(kg, features, num_relations, aggregator)
        _inputs_cache.insert(0, inputs)
        del _inputs_cache[INPUTS_CACHE_SIZE:]
        return inputs


def layer_pre_activation(params: Params, operators: List[sparse.csr_matrix], layer: int,
                         hidden: np.ndarray) -> np.ndarray:
    pre = hidden @ params[self_weights(layer)] + params[layer_bias(layer)]
    rel = params[relation_weights(layer)]
    for relation, operator in enumerate(operators):
        if operator.nnz:
            pre = pre + operator @ (hidden @ rel[relation])
    return pre


def gnn_forward(params: Params, operators: List[sparse.csr_matrix], x: Optional[np.ndarray],
                first_pre: Optional[np.ndarray] = None):
    """
    h' = ReLU(h W_self + sum_r (A_r h) W_r + b) per layer, score = h_L w_out + b_out
    :param first_pre: precomputed first layer pre-activation, replaces first layer weights and x
    :return: (scores for all nodes, per-layer (input, pre-activation) cache)
    """
    layers = int(params[HYPER][0])
    hidden = x
    cache = []
    for layer in range(layers):
        if layer == 0 and first_pre is not None:
            pre = first_pre
        else:
            pre = layer_pre_activation(params, operators, layer, hidden)
        cache.append((hidden, pre))
        hidden = np.maximum(pre, 0.0)
    scores = hidden @ params[OUT_WEIGHTS] + params[OUT_BIAS][0]
    return scores, cache


def weight_norm(params: Params, first_layer: bool = True) -> float:
    layers = int(params[HYPER][0])
    norm = float(np.sum(params[OUT_WEIGHTS] ** 2))
    for layer in range(0 if first_layer else 1, layers):
        norm += float(np.sum(params[self_weights(layer)] ** 2) + np.sum(params[relation_weights(layer)] ** 2))
    return norm


def score_gradient(num_nodes: int, labeled: np.ndarray, residual: np.ndarray) -> np.ndarray:
    d_scores = np.zeros(num_nodes)
    d_scores[labeled] = 2.0 / len(labeled) * residual
    return d_scores


def gnn_backward(params: Params, operators: List[sparse.csr_matrix], cache, d_scores: np.ndarray, l2: float,
                 first_layer: bool = True) -> Tuple[Params, np.ndarray]:
    """
    Backpropagates score gradient. Input features get no gradient
    :param first_layer: False leaves first layer weight gradients to caller
    :return: gradients and gradient of first layer pre-activation
    """
    layers = int(params[HYPER][0])
    last = np.maximum(cache[-1][1], 0.0)
    grads = {
        OUT_WEIGHTS: last.T @ d_scores + 2.0 * l2 * params[OUT_WEIGHTS],
        OUT_BIAS: np.array([d_scores.sum()]),
    }
    d_hidden = np.outer(d_scores, params[OUT_WEIGHTS])
    for layer in reversed(range(layers)):
        hidden, pre = cache[layer]
        d_pre = d_hidden * (pre > 0)
        grads[layer_bias(layer)] = d_pre.sum(axis=0)
        if layer == 0 and not first_layer:
            break
        rel = params[relation_weights(layer)]
        d_rel = 2.0 * l2 * rel
        d_hidden = d_pre @ params[self_weights(layer)].T if layer else None
        for relation, operator in enumerate(operators):
            if not operator.nnz:
                continue
            back = operator.T @ d_pre
            d_rel[relation] += hidden.T @ back
            if layer:
                d_hidden = d_hidden + back @ rel[relation].T
        grads[self_weights(layer)] = hidden.T @ d_pre + 2.0 * l2 * params[self_weights(layer)]
        grads[relation_weights(layer)] = d_rel
    return grads, d_pre


def gnn_loss_and_grads(params: Params, operators: List[sparse.csr_matrix], x: np.ndarray,
                       labeled: np.ndarray, y: np.ndarray, l2: float) -> Tuple[float, Params]:
    """
    MSE over labeled rows plus l2 on weight matrices, with analytic gradients
    """
    scores, cache = gnn_forward(params, operators, x)
    residual = scores[labeled] - y
    loss = float(np.mean(residual ** 2) + l2 * weight_norm(params))
    grads, _ = gnn_backward(params, operators, cache, score_gradient(len(scores), labeled, residual), l2)
    return loss, grads


def gnn_dual_loss_and_grads(params: Params, inputs: MessagePassingInputs, initial: Tuple[np.ndarray, float],
                            labeled: np.ndarray, y: np.ndarray, l2: float) -> Tuple[float, Params]:
    """
    Same objective as gnn_loss_and_grads with first layer weights W = scale * W_init + Z^T coef.
    Step on (scale, coef) along returned gradients equals gradient step on W
    :param initial: Z W_init and squared norm of W_init
    """
    projected, initial_norm = initial
    scale = params[SCALE][0]
    coef = params[COEF]
    kernel = inputs.gram @ coef
    first_pre = scale * projected + kernel + params[layer_bias(0)]
    scores, cache = gnn_forward(params, inputs.operators, None, first_pre=first_pre)
    residual = scores[labeled] - y
    first_norm = (scale ** 2 * initial_norm + 2.0 * scale * float(np.sum(projected * coef))
                  + float(np.sum(coef * kernel)))
    loss = float(np.mean(residual ** 2) + l2 * (weight_norm(params, first_layer=False) + first_norm))
    grads, d_first = gnn_backward(params, inputs.operators, cache, score_gradient(len(scores), labeled, residual), l2,
                                  first_layer=False)
    grads[COEF] = d_first + 2.0 * l2 * coef
    grads[SCALE] = np.array([2.0 * l2 * scale])
    return loss, grads


def _train_dual(params: Params, inputs: MessagePassingInputs, labeled: np.ndarray, y: np.ndarray,
                config: ModelConfig) -> List[float]:
    first_self = params[self_weights(0)]
    first_rel = params[relation_weights(0)]
    initial = (inputs.project(first_self, first_rel), float(np.sum(first_self ** 2) + np.sum(first_rel ** 2)))
    trainable = {name: tensor for name, tensor in params.items()
                 if name not in (HYPER, self_weights(0), relation_weights(0))}
    trainable[SCALE] = np.ones(1)
    trainable[COEF] = np.zeros((inputs.x.shape[0], config.hidden_dim))
    trace = gradient_descent(lambda p: gnn_dual_loss_and_grads({HYPER: params[HYPER], **p}, inputs, initial, labeled,
                                                               y, config.l2),
                             trainable, config.learning_rate, config.epochs, KIND_GNN)
    scale = trainable[SCALE][0]
    self_part, rel_part = inputs.expand(trainable[COEF])
    params[self_weights(0)] = scale * first_self + self_part
    params[relation_weights(0)] = scale * first_rel + rel_part
    return trace


def train_hetero_gnn(kg: KnowledgeGraph, features: NodeFeatureTable, labels: List[ImportanceLabel],
                     config: ModelConfig) -> TrainedModel:
    """
    Relation-aware message passing regressor trained on labeled nodes
    :param kg: graph providing message paths
    :param features: initial features, missing nodes get zero vectors
    :param labels: training labels
    :param config: model configuration with learning rate set
    :raises ModelConfigError, ModelTrainingError
    """
    if config.learning_rate is None:
        raise ModelConfigError(f"Model '{KIND_GNN}' requires learning rate")
    if features.dim < 1:
        raise ModelConfigError("Features should have at least one dimension")
    if len(labels) < 2:
        raise ModelConfigError(f"At least 2 training examples required, got {len(labels)}")
    inputs = message_passing_inputs(kg, features, kg.num_relations, config.aggregator)
    labeled = np.asarray([label.node for label in labels], dtype=np.int64)
    y = np.asarray([label.value for label in labels], dtype=np.float64)
    params = init_gnn(features.dim, config, kg.num_relations)
    if inputs.dual:
        trace = _train_dual(params, inputs, labeled, y, config)
    else:
        trainable = {name: tensor for name, tensor in params.items() if name != HYPER}
        trace = gradient_descent(lambda p: gnn_loss_and_grads({HYPER: params[HYPER], **p}, inputs.operators,
                                                              inputs.x, labeled, y, config.l2),
                                 trainable, config.learning_rate, config.epochs, KIND_GNN)
    return TrainedModel(KIND_GNN, params, trace)


def predict_gnn(model: TrainedModel, kg: KnowledgeGraph, features: NodeFeatureTable,
                nodes: List[int]) -> Tuple[np.ndarray, Dict[str, int]]:
    """
    Scores nodes with trained network. Relations unseen in training are skipped
    :return: scores aligned with nodes and diagnostic flags
    """
    hyper = model.params[HYPER]
    inputs = message_passing_inputs(kg, features, int(hyper[1]), AGGREGATORS[int(hyper[2])])
    flags = {}
    if inputs.skipped:
        logger.warning(f"Skipped {inputs.skipped} triplets with relations unknown to model")
        flags[FLAG_UNKNOWN_RELATIONS] = inputs.skipped
    scores, _ = gnn_forward(model.params, inputs.operators, inputs.x)
    return scores[np.asarray(nodes, dtype=np.int64)], flags
