"""Node-classification metrics and the evaluation harness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ego import EgoShape, sample_ego_batch
from .graph import Graph, one_hot
from .neural import ModelParams, model_logits, soft_cross_entropy


def micro_f1(predictions, truths) -> float:
    """Micro-averaged F1; for single-label multiclass data this is accuracy."""
    predictions, truths = np.asarray(predictions), np.asarray(truths)
    if predictions.shape != truths.shape:
        raise ValueError("predictions and truths differ in length")
    if predictions.size == 0:
        raise ValueError("micro_f1 of an empty sample")
    return float(np.mean(predictions == truths))


def macro_f1(predictions, truths, num_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1 over the classes present in either array."""
    predictions, truths = np.asarray(predictions), np.asarray(truths)
    if predictions.size == 0:
        raise ValueError("macro_f1 of an empty sample")
    classes = np.union1d(predictions, truths) if num_classes is None else np.arange(num_classes)
    scores = []
    for c in classes:
        tp = np.sum((predictions == c) & (truths == c))
        fp = np.sum((predictions == c) & (truths != c))
        fn = np.sum((predictions != c) & (truths == c))
        if tp + fp + fn == 0:
            continue
        scores.append(2 * tp / (2 * tp + fp + fn))
    return float(np.mean(scores)) if scores else 0.0


@dataclass(frozen=True)
class Metrics:
    micro_f1: float
    macro_f1: float
    loss: float
    count: int

    def to_dict(self) -> dict:
        return {"micro_f1": self.micro_f1, "macro_f1": self.macro_f1, "loss": self.loss, "count": self.count}


@dataclass(frozen=True, eq=False)
class EvalSet:
    """Evaluation nodes with one pre-drawn ego-graph each, shared by every model scored on it."""

    nodes: np.ndarray
    node_at: np.ndarray


def sample_eval_set(graph: Graph, nodes, shape: EgoShape, rng: np.random.Generator) -> EvalSet:
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("evaluation node set is empty")
    return EvalSet(nodes, sample_ego_batch(graph, nodes, shape, rng))


def evaluate_on(model: ModelParams, graph: Graph, eval_set: EvalSet, shape: EgoShape) -> Metrics:
    logits = model_logits(model, graph.compute_features(), eval_set.node_at, shape)
    truths = graph.labels[eval_set.nodes]
    preds = logits.argmax(axis=1)
    loss = soft_cross_entropy(logits, one_hot(truths, graph.num_classes))
    return Metrics(micro_f1(preds, truths), macro_f1(preds, truths), loss, int(truths.size))


def evaluate_model(model: ModelParams, graph: Graph, node_set, shape: EgoShape,
                   eval_rng: np.random.Generator) -> Metrics:
    """Sample one ego-graph per node from ``eval_rng``, predict, and score."""
    return evaluate_on(model, graph, sample_eval_set(graph, node_set, shape, eval_rng), shape)
