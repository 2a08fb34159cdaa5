import logging
import math
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from lenie.embedcore.matrix import EmbeddingMatrix
from lenie.kgcore.labels import ImportanceLabel

logger = logging.getLogger(__name__)

# Config keys
KIND = "kind"
HIDDEN_DIM = "hidden_dim"
LAYERS = "layers"
LEARNING_RATE = "learning_rate"
EPOCHS = "epochs"
L2 = "l2"
SEED = "seed"
DAMPING = "damping"
PR_TOL = "pr_tol"
PR_MAX_ITERS = "pr_max_iters"
AGGREGATOR = "aggregator"
MODEL_KEYS = [KIND, HIDDEN_DIM, LAYERS, LEARNING_RATE, EPOCHS, L2, SEED, DAMPING, PR_TOL, PR_MAX_ITERS, AGGREGATOR]

KIND_PAGERANK = "pagerank"
KIND_PPR = "ppr"
KIND_LINREG = "linreg"
KIND_MLP = "mlp"
KIND_GNN = "gnn"
# Order defines checkpoint kind byte
MODEL_KINDS = [KIND_PAGERANK, KIND_PPR, KIND_LINREG, KIND_MLP, KIND_GNN]
TOPOLOGY_KINDS = [KIND_PAGERANK, KIND_PPR]

AGGREGATOR_MEAN = "mean"
AGGREGATOR_SUM = "sum"
AGGREGATORS = [AGGREGATOR_MEAN, AGGREGATOR_SUM]

# Flags
FLAG_CONSTANT_PREDICTOR = "constant_predictor"
FLAG_NOT_CONVERGED = "not_converged"
FLAG_UNKNOWN_RELATIONS = "unknown_relations"

# Parameter names
HYPER = "hyper"
WEIGHTS = "w"
BIAS = "b"
HIDDEN_WEIGHTS = "W1"
HIDDEN_BIAS = "b1"
OUT_WEIGHTS = "w2"
OUT_BIAS = "b2"
SCORES = "scores"

Params = Dict[str, np.ndarray]
LossAndGrads = Callable[[Params], Tuple[float, Params]]


class ModelConfig:
    """
    Importance estimator selection and its hyper-parameters
    """

    def __init__(self, kind: str,
                 hidden_dim: int = 64,
                 layers: int = 2,
                 learning_rate: Optional[float] = None,
                 epochs: int = 200,
                 l2: float = 1e-5,
                 seed: int = 0,
                 damping: float = 0.85,
                 pr_tol: float = 1e-9,
                 pr_max_iters: int = 200,
                 aggregator: str = AGGREGATOR_MEAN):
        """
        :param kind: pagerank, ppr, linreg, mlp or gnn
        :param hidden_dim: hidden width of mlp and gnn
        :param layers: message passing layers of gnn
        :param learning_rate: gradient descent step, None until chosen by grid search
        :param epochs: full-batch gradient steps
        :param l2: weight decay coefficient
        :param seed: weight init seed
        :param damping: PageRank damping factor
        :param pr_tol: PageRank L1 convergence threshold
        :param pr_max_iters: PageRank iteration cap
        :param aggregator: gnn neighbor aggregation, mean or sum
        :raises ModelConfigError
        """
        if kind not in MODEL_KINDS:
            raise ModelConfigError(f"Unknown model kind '{kind}'. Should be one of {MODEL_KINDS}")
        for name, value in ((HIDDEN_DIM, hidden_dim), (LAYERS, layers), (EPOCHS, epochs),
                            (PR_MAX_ITERS, pr_max_iters)):
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ModelConfigError(f"Incorrect '{name}' value '{value}'. Should be positive int")
        if learning_rate is not None and (not _is_real(learning_rate) or not learning_rate > 0):
            raise ModelConfigError(f"Incorrect '{LEARNING_RATE}' value '{learning_rate}'. Should be positive")
        if not _is_real(l2) or l2 < 0:
            raise ModelConfigError(f"Incorrect '{L2}' value '{l2}'. Should be non-negative")
        if not _is_real(damping) or not 0 < damping < 1:
            raise ModelConfigError(f"Incorrect '{DAMPING}' value '{damping}'. Should be in (0, 1)")
        if not _is_real(pr_tol) or not pr_tol > 0:
            raise ModelConfigError(f"Incorrect '{PR_TOL}' value '{pr_tol}'. Should be positive")
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ModelConfigError(f"Incorrect '{SEED}' value '{seed}'. Should be non-negative int")
        if aggregator not in AGGREGATORS:
            raise ModelConfigError(f"Unknown aggregator '{aggregator}'. Should be one of {AGGREGATORS}")
        self.kind = kind
        self.hidden_dim = hidden_dim
        self.layers = layers
        self.learning_rate = None if learning_rate is None else float(learning_rate)
        self.epochs = epochs
        self.l2 = float(l2)
        self.seed = seed
        self.damping = float(damping)
        self.pr_tol = float(pr_tol)
        self.pr_max_iters = pr_max_iters
        self.aggregator = aggregator

    @property
    def is_topology(self) -> bool:
        return self.kind in TOPOLOGY_KINDS

    def with_learning_rate(self, learning_rate: float) -> "ModelConfig":
        values = self.as_dict()
        values[LEARNING_RATE] = learning_rate
        return ModelConfig(**values)

    def as_dict(self) -> Dict[str, Any]:
        return {
            KIND: self.kind,
            HIDDEN_DIM: self.hidden_dim,
            LAYERS: self.layers,
            LEARNING_RATE: self.learning_rate,
            EPOCHS: self.epochs,
            L2: self.l2,
            SEED: self.seed,
            DAMPING: self.damping,
            PR_TOL: self.pr_tol,
            PR_MAX_ITERS: self.pr_max_iters,
            AGGREGATOR: self.aggregator,
        }

    def __eq__(self, other):
        return isinstance(other, ModelConfig) and self.as_dict() == other.as_dict()

    def __repr__(self):
        return f"ModelConfig({self.kind}, lr={self.learning_rate})"


class NodeFeatureTable:
    """
    Initial node features aligned with node ids
    """

    def __init__(self, node_ids: List[int], matrix: EmbeddingMatrix):
        """
        :param node_ids: node id per matrix row
        :param matrix: feature rows
        :raises ModelConfigError
        """
        if len(node_ids) != matrix.rows:
            raise ModelConfigError(f"Feature table has {len(node_ids)} ids for {matrix.rows} rows")
        self.node_ids = list(node_ids)
        self.matrix = matrix
        self._row_of = {node: row for row, node in enumerate(self.node_ids)}
        if len(self._row_of) != len(self.node_ids):
            raise ModelConfigError("Feature table node ids are not unique")

    @property
    def dim(self) -> int:
        return self.matrix.dim

    def has(self, node: int) -> bool:
        return node in self._row_of

    def rows(self, nodes: List[int]) -> np.ndarray:
        """
        :return: float64 feature rows for nodes
        :raises ModelLookupError
        """
        try:
            indices = [self._row_of[node] for node in nodes]
        except KeyError as e:
            raise ModelLookupError(f"Node {e.args[0]} has no feature row") from e
        return self.matrix.data[indices].astype(np.float64)

    def dense(self, num_nodes: int) -> np.ndarray:
        """
        :return: (num_nodes, dim) float64 matrix, zero rows for nodes without features
        """
        result = np.zeros((num_nodes, self.dim), dtype=np.float64)
        for row, node in enumerate(self.node_ids):
            if node < num_nodes:
                result[node] = self.matrix.data[row]
        return result

    def __repr__(self):
        return f"NodeFeatureTable(nodes={len(self.node_ids)}, dim={self.dim})"


class Prediction:
    """
    Predicted score per node
    """

    def __init__(self, nodes: List[int], scores: np.ndarray, flags: Optional[Dict[str, Any]] = None):
        self.nodes = list(nodes)
        self.scores = np.asarray(scores, dtype=np.float64)
        self.flags = flags if flags is not None else {}

    def for_nodes(self, nodes: List[int]) -> np.ndarray:
        """
        :raises ModelLookupError
        """
        position = {node: index for index, node in enumerate(self.nodes)}
        try:
            return self.scores[[position[node] for node in nodes]]
        except KeyError as e:
            raise ModelLookupError(f"Node {e.args[0]} has no prediction") from e

    def as_dict(self) -> Dict[int, float]:
        return {node: float(score) for node, score in zip(self.nodes, self.scores)}

    def __eq__(self, other):
        return isinstance(other, Prediction) and self.nodes == other.nodes and \
            np.array_equal(self.scores, other.scores)

    def __repr__(self):
        return f"Prediction(nodes={len(self.nodes)})"


class TrainedModel:
    def __init__(self, kind: str, params: Params, loss_trace: List[float], flags: Optional[Dict[str, Any]] = None):
        """
        :param kind: model kind
        :param params: named parameter tensors, 'hyper' first
        :param loss_trace: training loss per epoch plus final loss
        :param flags: diagnostic flags
        """
        self.kind = kind
        self.params = params
        self.loss_trace = loss_trace
        self.flags = flags if flags is not None else {}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(tensor)) for tensor in self.params.values())

    def __eq__(self, other):
        return isinstance(other, TrainedModel) and self.kind == other.kind and \
            list(self.params) == list(other.params) and \
            all(np.array_equal(self.params[name], other.params[name]) for name in self.params)

    def __repr__(self):
        return f"TrainedModel({self.kind}, tensors={len(self.params)})"


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def gradient_descent(loss_and_grads: LossAndGrads, params: Params, learning_rate: float, epochs: int,
                     kind: str) -> List[float]:
    """
    Full-batch gradient descent updating params in place
    :return: loss before every step and after the last one
    :raises ModelTrainingError
    """
    trace = []
    for epoch in range(epochs + 1):
        loss, grads = loss_and_grads(params)
        if not math.isfinite(loss):
            raise ModelTrainingError(f"Training of '{kind}' diverged at epoch {epoch} with learning rate "
                                     f"{learning_rate}. Try smaller learning rate")
        trace.append(loss)
        if epoch == epochs:
            break
        for name, grad in grads.items():
            params[name] -= learning_rate * grad
    logger.debug(f"Trained '{kind}' for {epochs} epochs, loss {trace[0]} -> {trace[-1]}")
    return trace


def training_arrays(features: NodeFeatureTable, labels: List[ImportanceLabel]) -> Tuple[np.ndarray, np.ndarray]:
    """
    :raises ModelConfigError, ModelLookupError
    """
    if features.dim < 1:
        raise ModelConfigError("Features should have at least one dimension")
    if len(labels) < 2:
        raise ModelConfigError(f"At least 2 training examples required, got {len(labels)}")
    x = features.rows([label.node for label in labels])
    y = np.asarray([label.value for label in labels], dtype=np.float64)
    return x, y


def _require_learning_rate(config: ModelConfig) -> float:
    if config.learning_rate is None:
        raise ModelConfigError(f"Model '{config.kind}' requires '{LEARNING_RATE}'")
    return config.learning_rate


def linreg_loss_and_grads(params: Params, x: np.ndarray, y: np.ndarray, l2: float) -> Tuple[float, Params]:
    residual = x @ params[WEIGHTS] + params[BIAS][0] - y
    n = y.shape[0]
    loss = float(np.mean(residual ** 2) + l2 * np.sum(params[WEIGHTS] ** 2))
    grads = {
        WEIGHTS: 2.0 / n * (x.T @ residual) + 2.0 * l2 * params[WEIGHTS],
        BIAS: np.array([2.0 / n * np.sum(residual)]),
    }
    return loss, grads


def train_linear_regression(features: NodeFeatureTable, labels: List[ImportanceLabel],
                            config: ModelConfig) -> TrainedModel:
    """
    Ridge-regularized least squares by full-batch gradient descent from zero init
    :raises ModelConfigError, ModelTrainingError
    """
    x, y = training_arrays(features, labels)
    dim = x.shape[1]
    params = {
        HYPER: np.array([dim], dtype=np.float64),
        WEIGHTS: np.zeros(dim),
        BIAS: np.zeros(1),
    }
    if np.all(y == y[0]):
        logger.warning(f"All {len(y)} labels equal {y[0]}, returning constant predictor")
        params[BIAS][0] = y[0]
        return TrainedModel(KIND_LINREG, params, [0.0], {FLAG_CONSTANT_PREDICTOR: True})
    learning_rate = _require_learning_rate(config)
    trainable = {name: params[name] for name in (WEIGHTS, BIAS)}
    trace = gradient_descent(lambda p: linreg_loss_and_grads(p, x, y, config.l2), trainable, learning_rate,
                             config.epochs, KIND_LINREG)
    return TrainedModel(KIND_LINREG, params, trace)


def init_mlp(dim: int, hidden_dim: int, seed: int) -> Params:
    rng = np.random.default_rng(seed)
    return {
        HYPER: np.array([dim, hidden_dim], dtype=np.float64),
        HIDDEN_WEIGHTS: glorot_uniform(rng, dim, hidden_dim, (dim, hidden_dim)),
        HIDDEN_BIAS: np.zeros(hidden_dim),
        OUT_WEIGHTS: glorot_uniform(rng, hidden_dim, 1, (hidden_dim,)),
        OUT_BIAS: np.zeros(1),
    }


def mlp_forward(params: Params, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    :return: (pre-activation hidden values, predictions)
    """
    pre = x @ params[HIDDEN_WEIGHTS] + params[HIDDEN_BIAS]
    return pre, np.maximum(pre, 0.0) @ params[OUT_WEIGHTS] + params[OUT_BIAS][0]


def mlp_loss_and_grads(params: Params, x: np.ndarray, y: np.ndarray, l2: float) -> Tuple[float, Params]:
    pre, pred = mlp_forward(params, x)
    hidden = np.maximum(pre, 0.0)
    n = y.shape[0]
    residual = pred - y
    loss = float(np.mean(residual ** 2) +
                 l2 * (np.sum(params[HIDDEN_WEIGHTS] ** 2) + np.sum(params[OUT_WEIGHTS] ** 2)))
    d_pred = 2.0 / n * residual
    d_pre = np.outer(d_pred, params[OUT_WEIGHTS]) * (pre > 0)
    grads = {
        HIDDEN_WEIGHTS: x.T @ d_pre + 2.0 * l2 * params[HIDDEN_WEIGHTS],
        HIDDEN_BIAS: d_pre.sum(axis=0),
        OUT_WEIGHTS: hidden.T @ d_pred + 2.0 * l2 * params[OUT_WEIGHTS],
        OUT_BIAS: np.array([d_pred.sum()]),
    }
    return loss, grads


def train_mlp(features: NodeFeatureTable, labels: List[ImportanceLabel], config: ModelConfig) -> TrainedModel:
    """
    One hidden ReLU layer regressor trained on MSE by full-batch gradient descent
    :raises ModelConfigError, ModelTrainingError
    """
    x, y = training_arrays(features, labels)
    learning_rate = _require_learning_rate(config)
    params = init_mlp(x.shape[1], config.hidden_dim, config.seed)
    trainable = {name: params[name] for name in (HIDDEN_WEIGHTS, HIDDEN_BIAS, OUT_WEIGHTS, OUT_BIAS)}
    trace = gradient_descent(lambda p: mlp_loss_and_grads(p, x, y, config.l2), trainable, learning_rate,
                             config.epochs, KIND_MLP)
    return TrainedModel(KIND_MLP, params, trace)


def configure_model(config: Any, seed: int) -> ModelConfig:
    """
    Builds model configuration. Bare kind name expands to kind defaults
    :param config: mapping or kind name
    :param seed: global seed used when mapping has none
    :raises ModelConfigError
    """
    if isinstance(config, str):
        config = {KIND: config}
    if not isinstance(config, dict):
        raise ModelConfigError(f"Incorrect model configuration type. Should be dict or str, is {type(config)}")
    for key in config:
        if key not in MODEL_KEYS:
            raise ModelConfigError(f"Unknown key '{key}' in model configuration")
    if KIND not in config:
        raise ModelConfigError(f"Missing required key '{KIND}' in model configuration")
    values = dict(config)
    values.setdefault(SEED, seed)
    return ModelConfig(**values)


def _is_real(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


class ModelError(Exception):
    pass


class ModelConfigError(ModelError):
    pass


class ModelTrainingError(ModelError):
    pass


class ModelLookupError(ModelError):
    pass
