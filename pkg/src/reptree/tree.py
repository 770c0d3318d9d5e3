"""Replica forests and the run configuration that shapes them.

Every client is an anchor node; each anchor is expanded into a tree of
virtual replicas whose datasets are perturbed copies of their parent's.
Node identity is the path from the anchor (anchor index, then 1-based
replica indices), which also seeds all node-local randomness.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field, fields

from .data import Dataset
from .models import ModelParams

NodePath = tuple[int, ...]

OPTIMIZERS = ("sgd", "adam")
PERTURBATION_MODES = ("random", "stratified")
AGGREGATION_MODES = ("diversity", "simple")
PerturbFn = Callable[[Dataset, int], Dataset]


@dataclass
class ReplicaNode:
    """One model in the forest: an anchor (path length 1) or a replica."""

    path: NodePath
    params: ModelParams
    dataset: Dataset
    children: list[ReplicaNode] = field(default_factory=list)

    @property
    def is_anchor(self) -> bool:
        return len(self.path) == 1

    @property
    def anchor_index(self) -> int:
        return self.path[0]

    def subtree(self) -> Iterator[ReplicaNode]:
        """This node and all descendants, depth-first in replica order."""
        yield self
        for child in self.children:
            yield from child.subtree()


def _per_client(value, n_clients: int, name: str) -> tuple:
    if isinstance(value, (list, tuple)):
        if len(value) != n_clients:
            raise ValueError(
                f"{name} has {len(value)} entries for {n_clients} clients"
            )
        return tuple(value)
    return (value,) * n_clients


@dataclass
class FederationConfig:
    """Everything a federated run needs besides data and model architecture.

    ``replicas``, ``perturbation`` and ``depth`` accept a scalar (applied to
    every client) or one value per client.
    """

    n_clients: int
    replicas: int | Sequence[int] = 3
    perturbation: float | Sequence[float] = 10.0
    depth: int | Sequence[int] = 1
    local_epochs: int = 10
    rounds: int = 10
    lr: float = 0.005
    batch_size: int = 20
    optimizer: str = "sgd"
    loss: str = "cross_entropy"
    perturbation_mode: str = "random"
    aggregation_mode: str = "diversity"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_clients < 1:
            raise ValueError(f"need at least one client, got {self.n_clients}")
        self.replicas = tuple(int(r) for r in _per_client(self.replicas, self.n_clients, "replicas"))
        self.perturbation = tuple(
            float(p) for p in _per_client(self.perturbation, self.n_clients, "perturbation")
        )
        self.depth = tuple(int(d) for d in _per_client(self.depth, self.n_clients, "depth"))
        if any(r < 0 for r in self.replicas):
            raise ValueError(f"replica counts must be nonnegative, got {self.replicas}")
        if any(d < 0 for d in self.depth):
            raise ValueError(f"depths must be nonnegative, got {self.depth}")
        if any(not 0.0 < p < 100.0 for p in self.perturbation):
            raise ValueError(f"perturbation percentages must be in (0, 100), got {self.perturbation}")
        if self.local_epochs < 1 or self.rounds < 1:
            raise ValueError(
                f"epochs and rounds must be positive, got E={self.local_epochs} R={self.rounds}"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch size must be positive, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}, expected one of {OPTIMIZERS}")
        if self.loss not in ("cross_entropy", "l1"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.perturbation_mode not in PERTURBATION_MODES:
            raise ValueError(
                f"unknown perturbation mode {self.perturbation_mode!r}, "
                f"expected one of {PERTURBATION_MODES}"
            )
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ValueError(
                f"unknown aggregation mode {self.aggregation_mode!r}, "
                f"expected one of {AGGREGATION_MODES}"
            )
        self.seed = int(self.seed)

    def as_dict(self) -> dict:
        """Plain-JSON view of the effective configuration."""
        out = {}
        for spec in fields(self):
            value = getattr(self, spec.name)
            out[spec.name] = list(value) if isinstance(value, tuple) else value
        return out


def total_model_count(config: FederationConfig) -> int:
    """Number of models in the whole forest: anchors plus every replica level."""
    total = config.n_clients
    for r, d in zip(config.replicas, config.depth):
        total += sum(r**level for level in range(1, d + 1))
    return total


def create_replicas(
    node: ReplicaNode, r: int, depth: int, perturbation: PerturbFn
) -> ReplicaNode:
    """Grow a replica tree under ``node``.

    Each of the r children gets a copy of the node's parameters and a
    perturbed copy of its dataset, then is expanded recursively one level
    shallower.  With r == 0 or depth == 0 the node is returned untouched.
    """
    if r < 0 or depth < 0:
        raise ValueError(f"replica count and depth must be nonnegative, got r={r} d={depth}")
    if r == 0 or depth == 0:
        return node
    for index in range(1, r + 1):
        child = ReplicaNode(
            path=node.path + (index,),
            params=node.params.copy(),
            dataset=perturbation(node.dataset, index),
        )
        create_replicas(child, r, depth - 1, perturbation)
        node.children.append(child)
    return node


def derive_node_seed(root_seed: int, path: NodePath) -> int:
    """Stable 63-bit seed for one node, derived from the root seed and path.

    Uses a cryptographic digest so nearby paths get unrelated seeds and the
    mapping never changes across runs or platforms.
    """
    if not path:
        raise ValueError("node paths must be nonempty")
    digest = hashlib.sha256()
    digest.update(str(int(root_seed)).encode())
    for part in path:
        digest.update(b"/")
        digest.update(str(int(part)).encode())
    return int.from_bytes(digest.digest()[:8], "big") >> 1
