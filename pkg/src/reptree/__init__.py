"""Replica-tree federated learning simulator."""

from .baselines import (
    ExperimentResult,
    ExperimentSetup,
    centralized_rounds,
    fedavg_rounds,
    run_ablation,
    run_centralized,
    run_fedavg,
    run_reptree,
    run_standalone,
    standalone_rounds,
)
from .data import (
    CsvSchema,
    Dataset,
    generate_synthetic,
    kfold_assign,
    load_csv,
    perturb_random,
    perturb_stratified,
)
from .federation import (
    RoundReport,
    TrainingDiverged,
    aggregate_diversity,
    aggregate_simple,
    compute_div_aggregation_weights,
    run_federation,
    server_round,
)
from .metrics import MetricSet, evaluate
from .models import ModelParams, ModelSpec, init_params, model_divergence
from .tree import FederationConfig, ReplicaNode, create_replicas, total_model_count

__version__ = "0.1.0"

__all__ = [
    "CsvSchema",
    "Dataset",
    "ExperimentResult",
    "ExperimentSetup",
    "FederationConfig",
    "MetricSet",
    "ModelParams",
    "ModelSpec",
    "ReplicaNode",
    "RoundReport",
    "TrainingDiverged",
    "aggregate_diversity",
    "aggregate_simple",
    "centralized_rounds",
    "compute_div_aggregation_weights",
    "create_replicas",
    "evaluate",
    "fedavg_rounds",
    "generate_synthetic",
    "init_params",
    "kfold_assign",
    "load_csv",
    "model_divergence",
    "perturb_random",
    "perturb_stratified",
    "run_ablation",
    "run_centralized",
    "run_fedavg",
    "run_federation",
    "run_reptree",
    "run_standalone",
    "server_round",
    "standalone_rounds",
    "total_model_count",
]
