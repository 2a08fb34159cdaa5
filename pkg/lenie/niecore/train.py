import logging
from typing import List, Optional

import numpy as np

from lenie.kgcore.graph import KnowledgeGraph
from lenie.kgcore.labels import ImportanceLabel
from lenie.niecore.gnn import train_hetero_gnn, predict_gnn
from lenie.niecore.models import ModelConfig, NodeFeatureTable, TrainedModel, Prediction, ModelConfigError, \
    ModelLookupError, train_linear_regression, train_mlp, mlp_forward, KIND_PAGERANK, KIND_PPR, KIND_LINREG, \
    KIND_MLP, KIND_GNN, HYPER, WEIGHTS, BIAS, SCORES
from lenie.niecore.pagerank import pagerank, personalized_pagerank

logger = logging.getLogger(__name__)


def train_model(kg: KnowledgeGraph, features: Optional[NodeFeatureTable], labels: List[ImportanceLabel],
                config: ModelConfig) -> TrainedModel:
    """
    Fits model of configured kind. Topology kinds ignore features and labels,
    personalized PageRank restarts from the labeled training nodes
    :raises ModelError
    """
    if config.kind in (KIND_PAGERANK, KIND_PPR):
        if config.kind == KIND_PAGERANK:
            prediction = pagerank(kg, config.damping, config.pr_tol, config.pr_max_iters)
        else:
            prediction = personalized_pagerank(kg, [label.node for label in labels] or None,
                                               config.damping, config.pr_tol, config.pr_max_iters)
        params = {
            HYPER: np.array([config.damping, config.pr_tol, config.pr_max_iters], dtype=np.float64),
            SCORES: prediction.scores,
        }
        return TrainedModel(config.kind, params, [], dict(prediction.flags))
    if features is None:
        raise ModelConfigError(f"Model '{config.kind}' requires node features")
    if config.kind == KIND_LINREG:
        return train_linear_regression(features, labels, config)
    if config.kind == KIND_MLP:
        return train_mlp(features, labels, config)
    return train_hetero_gnn(kg, features, labels, config)


def predict_scores(model: TrainedModel, kg: KnowledgeGraph, features: Optional[NodeFeatureTable],
                   nodes: List[int]) -> Prediction:
    """
    Scores requested nodes. Pure function of model and inputs
    :raises ModelLookupError, ModelConfigError
    """
    flags = dict(model.flags)
    if model.kind in (KIND_PAGERANK, KIND_PPR):
        scores = model.params[SCORES]
        for node in nodes:
            if node < 0 or node >= scores.shape[0]:
                raise ModelLookupError(f"Node {node} has no PageRank score")
        return Prediction(nodes, scores[np.asarray(nodes, dtype=np.int64)], flags)
    if features is None:
        raise ModelConfigError(f"Model '{model.kind}' requires node features")
    expected_dim = int(model.params[HYPER][0 if model.kind != KIND_GNN else 3])
    if features.dim != expected_dim:
        raise ModelConfigError(f"Feature dim {features.dim} does not match model input dim {expected_dim}")
    if model.kind == KIND_LINREG:
        x = features.rows(nodes)
        scores = x @ model.params[WEIGHTS] + model.params[BIAS][0]
    elif model.kind == KIND_MLP:
        _, scores = mlp_forward(model.params, features.rows(nodes))
    else:
        for node in nodes:
            if node < 0 or node >= kg.num_entities:
                raise ModelLookupError(f"Node {node} is outside the graph")
        scores, gnn_flags = predict_gnn(model, kg, features, nodes)
        flags.update(gnn_flags)
    return Prediction(nodes, scores, flags)
