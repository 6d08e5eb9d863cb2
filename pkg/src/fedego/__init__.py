"""Deterministic simulator for personalized federated learning over fixed-shape ego-graphs."""

from .ego import EgoShape, MashedEgoGraph, mash_batch, sample_ego_batch, sample_ego_graph, shape_positions
from .evaluation import Metrics, evaluate_model, macro_f1, micro_f1
from .federation import FedConfig, adaptive_lambda, comm_cost, earth_mover_distance, run_experiment
from .graph import Graph, PartitionConfig, generate_synthetic_graph, load_graph, partition_non_iid
from .neural import ModelParams, init_model

__all__ = [
    "EgoShape",
    "FedConfig",
    "Graph",
    "MashedEgoGraph",
    "Metrics",
    "ModelParams",
    "PartitionConfig",
    "adaptive_lambda",
    "comm_cost",
    "earth_mover_distance",
    "evaluate_model",
    "generate_synthetic_graph",
    "init_model",
    "load_graph",
    "macro_f1",
    "mash_batch",
    "micro_f1",
    "partition_non_iid",
    "run_experiment",
    "sample_ego_batch",
    "sample_ego_graph",
    "shape_positions",
]
