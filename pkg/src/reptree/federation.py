"""The federated protocol: recursive tree updates, diversity-weighted
aggregation, and the server round that ties anchors together.

Each round every anchor trains locally, lets its replica tree train
recursively, and folds the replicas back in with weights proportional to
how far each replica drifted from its parent.  The server then averages the
anchors' common layers uniformly and broadcasts the result.  All node-level
randomness is derived from (root seed, node path, round), so results do not
depend on scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, perturb_random, perturb_stratified
from .metrics import MetricSet, evaluate, per_client_tests
from .models import (
    AdamState,
    ModelParams,
    ModelSpec,
    adam_step,
    aligned_common_layers,
    backward_and_loss,
    init_params,
    model_divergence,
    sgd_step,
)
from .tree import FederationConfig, NodePath, ReplicaNode, create_replicas, derive_node_seed

# below this total divergence the children are treated as interchangeable
ZERO_DIVERGENCE = 1e-12


class TrainingDiverged(RuntimeError):
    """Raised when a local loss stops being finite."""


@dataclass
class AggregationWeights:
    """Per-replica mixing weights, aligned with child order."""

    alpha: list[float]


@dataclass
class EdgeRecord:
    """Diversity diagnostics for one parent/child aggregation."""

    parent_path: NodePath
    child_path: NodePath
    div: float
    alpha: float
    child_loss: float


@dataclass
class AnchorRoundRecord:
    anchor_index: int
    loss_trajectory: list[float]
    edges: list[EdgeRecord]
    metrics: MetricSet | None


@dataclass
class RoundReport:
    round_index: int
    anchors: list[AnchorRoundRecord]


@dataclass
class RoundRecorder:
    """Collects training losses and aggregation edges for one anchor tree."""

    node_losses: dict[NodePath, list[float]] = field(default_factory=dict)
    edges: list[EdgeRecord] = field(default_factory=list)

    def record_training(self, path: NodePath, losses: list[float]) -> None:
        self.node_losses[path] = losses

    def record_edge(self, parent: NodePath, child: NodePath, div: float, alpha: float) -> None:
        child_losses = self.node_losses.get(child, [])
        self.edges.append(
            EdgeRecord(parent, child, div, alpha, child_losses[-1] if child_losses else float("nan"))
        )


def compute_div_aggregation_weights(divs: Sequence[float]) -> AggregationWeights:
    """Weights proportional to each replica's divergence from its parent.

    A replica that drifted further gets more say.  When the total divergence
    is numerically zero the weights fall back to uniform.
    """
    if len(divs) == 0:
        raise ValueError("no divergence values to weight")
    values = [float(d) for d in divs]
    if any(not np.isfinite(d) or d < 0 for d in values):
        raise ValueError(f"divergences must be finite and nonnegative, got {values}")
    total = sum(values)
    if total <= ZERO_DIVERGENCE:
        return AggregationWeights([1.0 / len(values)] * len(values))
    return AggregationWeights([d / total for d in values])


def _common_indices(params: ModelParams) -> list[int]:
    indices = [k for k, flag in enumerate(params.common_mask) if flag]
    if not indices:
        raise ValueError("model exposes no common layers")
    return indices


def aggregate_diversity(
    parent: ModelParams, children: Sequence[ModelParams], weights: AggregationWeights
) -> ModelParams:
    """Blend the parent with the alpha-weighted mix of its children.

    Each common layer becomes parent/2 plus the convex child combination/2,
    accumulated in child order.  Written in delta form so that children equal
    to the parent leave it exactly unchanged.  Personalized layers pass
    through untouched.
    """
    if not children:
        raise ValueError("no replicas to aggregate")
    if len(weights.alpha) != len(children):
        raise ValueError(
            f"{len(weights.alpha)} weights do not match {len(children)} replicas"
        )
    result = parent.copy()
    common = _common_indices(parent)
    for alpha, child in zip(weights.alpha, children):
        pairs = aligned_common_layers(parent, child)
        for k, (parent_layer, child_layer) in zip(common, pairs):
            result.layers[k].values += 0.5 * alpha * (child_layer.values - parent_layer.values)
    return result


def aggregate_simple(parent: ModelParams, children: Sequence[ModelParams]) -> ModelParams:
    """Uniform mean over the parent and all children on common layers."""
    if not children:
        raise ValueError("no replicas to aggregate")
    result = parent.copy()
    common = _common_indices(parent)
    sums = [parent.layers[k].values.copy() for k in common]
    for child in children:
        pairs = aligned_common_layers(parent, child)
        for acc, (_, child_layer) in zip(sums, pairs):
            acc += child_layer.values
    for k, acc in zip(common, sums):
        result.layers[k].values = acc / (len(children) + 1.0)
    return result


def train_epochs(
    params: ModelParams,
    dataset: Dataset,
    config: FederationConfig,
    node_seed: int,
    round_index: int,
    context: str,
) -> tuple[ModelParams, list[float]]:
    """E epochs of minibatch training; returns new params and per-epoch loss."""
    rng = np.random.default_rng([node_seed, round_index])
    opt_state = AdamState.fresh(params) if config.optimizer == "adam" else None
    epoch_losses: list[float] = []
    n = dataset.n
    for epoch in range(config.local_epochs):
        order = rng.permutation(n)
        weighted = 0.0
        for start in range(0, n, config.batch_size):
            rows = order[start : start + config.batch_size]
            loss, grads = backward_and_loss(
                params, dataset.features[rows], dataset.targets[rows], config.loss
            )
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at {context}, epoch {epoch}")
            if opt_state is not None:
                params, opt_state = adam_step(opt_state, params, grads, config.lr)
            else:
                params = sgd_step(params, grads, config.lr)
            weighted += loss * rows.size
        epoch_losses.append(weighted / n)
    return params, epoch_losses


def hetero_local_update(
    node: ReplicaNode,
    config: FederationConfig,
    *,
    round_index: int = 0,
    recorder: RoundRecorder | None = None,
) -> ModelParams:
    """Train one node for E epochs, updating common and personalized layers
    jointly from the same minibatch gradients."""
    node_seed = derive_node_seed(config.seed, node.path)
    node.params, losses = train_epochs(
        node.params,
        node.dataset,
        config,
        node_seed,
        round_index,
        context=f"node {node.path}, round {round_index}",
    )
    if recorder is not None:
        recorder.record_training(node.path, losses)
    return node.params


def client_update(
    node: ReplicaNode,
    config: FederationConfig,
    *,
    round_index: int = 0,
    recorder: RoundRecorder | None = None,
) -> ModelParams:
    """Recursive per-round update of a node and its replica tree.

    The node trains locally first.  Its children start the round from the
    node's pre-training parameters, update recursively (so deeper trees
    aggregate bottom-up), and are then folded into the node with
    diversity-proportional or uniform weights.
    """
    round_start = node.params.copy() if node.children else None
    hetero_local_update(node, config, round_index=round_index, recorder=recorder)
    if not node.children:
        return node.params
    for child in node.children:
        child.params = round_start.copy()
    child_params = [
        client_update(child, config, round_index=round_index, recorder=recorder)
        for child in node.children
    ]
    divs = [model_divergence(node.params, params) for params in child_params]
    if config.aggregation_mode == "diversity":
        weights = compute_div_aggregation_weights(divs)
        node.params = aggregate_diversity(node.params, child_params, weights)
        alphas = weights.alpha
    else:
        node.params = aggregate_simple(node.params, child_params)
        alphas = [1.0 / (len(child_params) + 1)] * len(child_params)
    if recorder is not None:
        for child, div, alpha in zip(node.children, divs, alphas):
            recorder.record_edge(node.path, child.path, div, alpha)
    return node.params


def server_round(
    anchors: Sequence[ReplicaNode],
    config: FederationConfig,
    *,
    round_index: int = 0,
    max_workers: int = 1,
    recorders: Sequence[RoundRecorder | None] | None = None,
) -> ModelParams:
    """One communication round.

    Every anchor runs its tree update (independently, so anchors may run on
    worker threads), then the server averages the anchors' common layers
    uniformly, accumulating in anchor order, and broadcasts the mean back.
    Returns the server model: averaged common layers on the first anchor's
    structure.
    """
    if not anchors:
        raise ValueError("no anchors to update")
    if recorders is None:
        recorders = [None] * len(anchors)
    if max_workers > 1 and len(anchors) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [
                pool.submit(client_update, anchor, config, round_index=round_index, recorder=rec)
                for anchor, rec in zip(anchors, recorders)
            ]
            updated = [future.result() for future in futures]
    else:
        updated = [
            client_update(anchor, config, round_index=round_index, recorder=rec)
            for anchor, rec in zip(anchors, recorders)
        ]
    first = updated[0]
    common = _common_indices(first)
    sums = [first.layers[k].values.copy() for k in common]
    for other in updated[1:]:
        pairs = aligned_common_layers(first, other)
        for acc, (_, layer) in zip(sums, pairs):
            acc += layer.values
    means = [acc / len(updated) for acc in sums]
    for anchor in anchors:
        for k, mean in zip(_common_indices(anchor.params), means):
            anchor.params.layers[k].values = mean.copy()
    server = first.copy()
    return server


def build_forest(
    config: FederationConfig, datasets: Sequence[Dataset], specs: Sequence[ModelSpec]
) -> list[ReplicaNode]:
    """Initialize anchors and grow each one's replica tree."""
    if len(datasets) != config.n_clients or len(specs) != config.n_clients:
        raise ValueError(
            f"config expects {config.n_clients} clients, got {len(datasets)} datasets "
            f"and {len(specs)} model specs"
        )
    for i, (dataset, spec) in enumerate(zip(datasets, specs)):
        if dataset.n_features != spec.n_inputs:
            raise ValueError(
                f"client {i}: dataset has {dataset.n_features} features but the model "
                f"expects {spec.n_inputs}"
            )
    anchors = []
    for i in range(config.n_clients):
        params = init_params(specs[i], derive_node_seed(config.seed, (i,)))
        anchor = ReplicaNode((i,), params, datasets[i])
        rate = config.perturbation[i]
        if config.perturbation_mode == "stratified":
            def perturb(ds: Dataset, idx: int, rate: float = rate) -> Dataset:
                return perturb_stratified(ds, rate, idx, config.seed)
        else:
            def perturb(ds: Dataset, idx: int, rate: float = rate) -> Dataset:
                return perturb_random(ds, rate, idx)
        create_replicas(anchor, config.replicas[i], config.depth[i], perturb)
        anchors.append(anchor)
    return anchors


def run_federation(
    config: FederationConfig,
    datasets: Sequence[Dataset],
    specs: Sequence[ModelSpec],
    *,
    test_data: Dataset | Sequence[Dataset] | None = None,
    max_workers: int = 1,
    round_hook=None,
) -> tuple[list[ModelParams], list[RoundReport]]:
    """Build the forest and run R server rounds.

    Returns the final anchor models and one report per round.  When test data
    is supplied (one shared set, or one per client) each round's report holds
    every anchor's post-broadcast metrics.  ``round_hook(t, anchor_params)``
    is called after each round with copies of the anchor models.
    """
    anchors = build_forest(config, datasets, specs)
    tests = per_client_tests(test_data, config.n_clients)
    reports: list[RoundReport] = []
    for round_index in range(config.rounds):
        recorders = [RoundRecorder() for _ in anchors]
        server_round(
            anchors,
            config,
            round_index=round_index,
            max_workers=max_workers,
            recorders=recorders,
        )
        records = []
        for i, (anchor, rec) in enumerate(zip(anchors, recorders)):
            metrics = evaluate(anchor.params, tests[i]) if tests[i] is not None else None
            records.append(
                AnchorRoundRecord(i, rec.node_losses.get((i,), []), rec.edges, metrics)
            )
        reports.append(RoundReport(round_index, records))
        if round_hook is not None:
            round_hook(round_index, [anchor.params.copy() for anchor in anchors])
    return [anchor.params for anchor in anchors], reports
