"""Reference baselines and the cross-validated experiment harness.

The baselines are deliberately flat reimplementations of their protocols
(plain federated averaging, isolated local training, centralized pooling)
rather than thin wrappers over the replica-tree engine, so degenerate tree
configurations can be cross-checked against them bit for bit.

The harness runs the rotation protocol: with m clients the pool is dealt
into m + 1 folds, configuration c hands fold (i + c) mod (m + 1) to client i
and the remaining fold to the shared test set, and every configuration is
run with identical seeds.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, concat_datasets, kfold_assign, slice_targets, subsample
from .federation import (
    AnchorRoundRecord,
    RoundReport,
    run_federation,
    train_epochs,
)
from .metrics import MetricSet, evaluate, per_client_tests
from .models import ModelParams, ModelSpec, aligned_common_layers, init_params
from .tree import FederationConfig, derive_node_seed

SWEEPABLE = ("perturbation", "depth", "aggregation_mode", "perturbation_mode", "dataset_size")
# accepted spellings for the same axes
SWEEP_ALIASES = {
    "perturbation_rate": "perturbation",
    "aggregation": "aggregation_mode",
    "client_dataset_size": "dataset_size",
}


def _check_clients(
    config: FederationConfig, datasets: Sequence[Dataset], specs: Sequence[ModelSpec]
) -> None:
    if len(datasets) != config.n_clients or len(specs) != config.n_clients:
        raise ValueError(
            f"config expects {config.n_clients} clients, got {len(datasets)} datasets "
            f"and {len(specs)} model specs"
        )


def _client_models(config: FederationConfig, specs: Sequence[ModelSpec]) -> list[ModelParams]:
    return [
        init_params(specs[i], derive_node_seed(config.seed, (i,)))
        for i in range(config.n_clients)
    ]


def _round_records(
    losses: list[list[float]],
    models: Sequence[ModelParams],
    tests: Sequence[Dataset | None],
) -> list[AnchorRoundRecord]:
    return [
        AnchorRoundRecord(
            i,
            losses[i],
            [],
            evaluate(models[i], tests[i]) if tests[i] is not None else None,
        )
        for i in range(len(models))
    ]


def fedavg_rounds(
    config: FederationConfig,
    datasets: Sequence[Dataset],
    specs: Sequence[ModelSpec],
    *,
    test_data: Dataset | Sequence[Dataset] | None = None,
    max_workers: int = 1,
    round_hook=None,
) -> tuple[list[ModelParams], list[RoundReport]]:
    """Plain federated averaging, kept independent of the tree engine.

    Per round each client trains E local epochs, then the server uniformly
    averages the common layers in client order and broadcasts the mean.
    """
    _check_clients(config, datasets, specs)
    models = _client_models(config, specs)
    tests = per_client_tests(test_data, config.n_clients)
    reports: list[RoundReport] = []
    for round_index in range(config.rounds):
        def train_one(i: int):
            return train_epochs(
                models[i],
                datasets[i],
                config,
                derive_node_seed(config.seed, (i,)),
                round_index,
                context=f"client {i}, round {round_index}",
            )

        if max_workers > 1 and config.n_clients > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                outcomes = list(pool.map(train_one, range(config.n_clients)))
        else:
            outcomes = [train_one(i) for i in range(config.n_clients)]
        losses = []
        for i, (params, epoch_losses) in enumerate(outcomes):
            models[i] = params
            losses.append(epoch_losses)
        common = [k for k, flag in enumerate(models[0].common_mask) if flag]
        if not common:
            raise ValueError("model exposes no common layers")
        sums = [models[0].layers[k].values.copy() for k in common]
        for other in models[1:]:
            for acc, (_, layer) in zip(sums, aligned_common_layers(models[0], other)):
                acc += layer.values
        means = [acc / len(models) for acc in sums]
        for params in models:
            own = [k for k, flag in enumerate(params.common_mask) if flag]
            for k, mean in zip(own, means):
                params.layers[k].values = mean.copy()
        reports.append(RoundReport(round_index, _round_records(losses, models, tests)))
        if round_hook is not None:
            round_hook(round_index, [params.copy() for params in models])
    return models, reports


def standalone_rounds(
    config: FederationConfig,
    datasets: Sequence[Dataset],
    specs: Sequence[ModelSpec],
    *,
    test_data: Dataset | Sequence[Dataset] | None = None,
    round_hook=None,
) -> tuple[list[ModelParams], list[RoundReport]]:
    """Isolated local training: R * E epochs per client, no communication."""
    _check_clients(config, datasets, specs)
    models = _client_models(config, specs)
    tests = per_client_tests(test_data, config.n_clients)
    reports: list[RoundReport] = []
    for round_index in range(config.rounds):
        losses = []
        for i in range(config.n_clients):
            models[i], epoch_losses = train_epochs(
                models[i],
                datasets[i],
                config,
                derive_node_seed(config.seed, (i,)),
                round_index,
                context=f"client {i}, round {round_index}",
            )
            losses.append(epoch_losses)
        reports.append(RoundReport(round_index, _round_records(losses, models, tests)))
        if round_hook is not None:
            round_hook(round_index, [params.copy() for params in models])
    return models, reports


def centralized_rounds(
    config: FederationConfig,
    datasets: Sequence[Dataset],
    specs: Sequence[ModelSpec],
    *,
    test_data: Dataset | None = None,
    round_hook=None,
) -> tuple[ModelParams, list[RoundReport]]:
    """Upper-bound reference: pool every client's data into one model.

    Trains a single model for R * E epochs on the concatenated data.  All
    clients must agree on the architecture; mixed heads have to be
    centralized per head group.
    """
    _check_clients(config, datasets, specs)
    if any(spec != specs[0] for spec in specs[1:]):
        raise ValueError(
            "clients disagree on model architecture; centralize each head group separately"
        )
    pooled = concat_datasets(list(datasets))
    params = init_params(specs[0], derive_node_seed(config.seed, (0,)))
    reports: list[RoundReport] = []
    for round_index in range(config.rounds):
        params, epoch_losses = train_epochs(
            params,
            pooled,
            config,
            derive_node_seed(config.seed, (0,)),
            round_index,
            context=f"centralized, round {round_index}",
        )
        metrics = evaluate(params, test_data) if test_data is not None else None
        reports.append(
            RoundReport(round_index, [AnchorRoundRecord(0, epoch_losses, [], metrics)])
        )
        if round_hook is not None:
            round_hook(round_index, [params.copy()])
    return params, reports


@dataclass
class ExperimentSetup:
    """Data pool and per-client architectures for one rotation experiment.

    ``n_folds`` must be one more than the client count.  ``stratified_folds``
    defaults to stratified for classification pools.  ``target_slices`` lets
    heterogeneous regression clients read different target columns of the
    shared pool.
    """

    pool: Dataset
    n_folds: int
    specs: list[ModelSpec]
    stratified_folds: bool | None = None
    target_slices: list[tuple[int, int]] | None = None

    def __post_init__(self) -> None:
        if self.n_folds != len(self.specs) + 1:
            raise ValueError(
                f"{len(self.specs)} clients need exactly {len(self.specs) + 1} folds, "
                f"got {self.n_folds}"
            )
        if self.target_slices is not None and len(self.target_slices) != len(self.specs):
            raise ValueError("target_slices must give one (start, stop) per client")

    @property
    def stratified(self) -> bool:
        if self.stratified_folds is None:
            return self.pool.is_classification
        return self.stratified_folds


@dataclass
class ExperimentResult:
    """Per-fold, per-client metrics of one method plus fold statistics."""

    method: str
    per_fold: list[list[MetricSet]]
    mean: list[dict[str, float]]
    std: list[dict[str, float]]
    config: dict
    duration_sec: float

    @property
    def n_folds(self) -> int:
        return len(self.per_fold)

    @property
    def n_clients(self) -> int:
        return len(self.per_fold[0])

    def mean_primary(self) -> float:
        """Grand mean of the head metric over clients and folds."""
        return float(
            np.mean([metrics.primary for fold in self.per_fold for metrics in fold])
        )


def _fold_statistics(
    per_fold: list[list[MetricSet]],
) -> tuple[list[dict[str, float]], list[dict[str, float]]]:
    n_clients = len(per_fold[0])
    means, stds = [], []
    for i in range(n_clients):
        rows = [fold[i].as_dict() for fold in per_fold]
        means.append({key: float(np.mean([row[key] for row in rows])) for key in rows[0]})
        stds.append({key: float(np.std([row[key] for row in rows])) for key in rows[0]})
    return means, stds


def _client_views(
    setup: ExperimentSetup, dataset: Dataset, client: int
) -> Dataset:
    if setup.target_slices is None:
        return dataset
    start, stop = setup.target_slices[client]
    return slice_targets(dataset, start, stop)


def _run_rotation(
    method: str, config: FederationConfig, setup: ExperimentSetup, engine, max_workers: int
) -> ExperimentResult:
    if config.n_clients != len(setup.specs):
        raise ValueError(
            f"config has {config.n_clients} clients but setup provides {len(setup.specs)} specs"
        )
    plan = kfold_assign(setup.pool, setup.n_folds, seed=config.seed, stratified=setup.stratified)
    started = time.perf_counter()
    per_fold: list[list[MetricSet]] = []
    for rotation in range(setup.n_folds):
        client_folds, test_fold = plan.client_test_folds(rotation, config.n_clients)
        clients = [
            _client_views(setup, setup.pool.take(plan.fold_positions(fold)), i)
            for i, fold in enumerate(client_folds)
        ]
        shared_test = setup.pool.take(plan.fold_positions(test_fold))
        tests = [_client_views(setup, shared_test, i) for i in range(config.n_clients)]
        models = engine(config, clients, setup.specs, tests, max_workers)
        per_fold.append([evaluate(model, tests[i]) for i, model in enumerate(models)])
    means, stds = _fold_statistics(per_fold)
    snapshot = config.as_dict() | {"method": method, "folds": setup.n_folds}
    return ExperimentResult(
        method, per_fold, means, stds, snapshot, time.perf_counter() - started
    )


def run_reptree(
    config: FederationConfig,
    setup: ExperimentSetup,
    *,
    max_workers: int = 1,
    method: str = "reptreefl",
) -> ExperimentResult:
    """Cross-validated replica-tree federation."""

    def engine(cfg, clients, specs, tests, workers):
        models, _ = run_federation(cfg, clients, specs, max_workers=workers)
        return models

    return _run_rotation(method, config, setup, engine, max_workers)


def run_fedavg(
    config: FederationConfig, setup: ExperimentSetup, *, max_workers: int = 1
) -> ExperimentResult:
    """Cross-validated plain federated averaging."""

    def engine(cfg, clients, specs, tests, workers):
        models, _ = fedavg_rounds(cfg, clients, specs, max_workers=workers)
        return models

    return _run_rotation("fedavg", config, setup, engine, max_workers)


def run_standalone(config: FederationConfig, setup: ExperimentSetup) -> ExperimentResult:
    """Cross-validated isolated training."""

    def engine(cfg, clients, specs, tests, workers):
        models, _ = standalone_rounds(cfg, clients, specs)
        return models

    return _run_rotation("standalone", config, setup, engine, max_workers=1)


def run_centralized(config: FederationConfig, setup: ExperimentSetup) -> ExperimentResult:
    """Cross-validated pooled training; reports one row per fold."""

    def engine(cfg, clients, specs, tests, workers):
        model, _ = centralized_rounds(cfg, clients, specs)
        return [model]

    return _run_rotation("centralized", config, setup, engine, max_workers=1)


def run_ablation(
    config: FederationConfig,
    setup: ExperimentSetup,
    parameter: str,
    values: Sequence,
    *,
    max_workers: int = 1,
) -> list[ExperimentResult]:
    """Sweep one axis of the replica-tree method with identical seeds.

    ``parameter`` is a config field (perturbation, depth, aggregation_mode,
    perturbation_mode) or ``dataset_size``, which shrinks the pool so every
    fold holds that many samples.
    """
    parameter = SWEEP_ALIASES.get(parameter, parameter)
    if parameter not in SWEEPABLE:
        raise ValueError(f"unknown sweep parameter {parameter!r}, expected one of {SWEEPABLE}")
    results = []
    for value in values:
        point_config, point_setup = config, setup
        if parameter == "dataset_size":
            pool = subsample(
                setup.pool,
                int(value) * setup.n_folds,
                seed=config.seed,
                stratified=setup.pool.is_classification,
            )
            point_setup = replace(setup, pool=pool)
        else:
            point_config = replace(config, **{parameter: value})
        result = run_reptree(point_config, point_setup, max_workers=max_workers)
        result.config |= {"sweep_parameter": parameter, "sweep_value": value}
        results.append(result)
    return results
