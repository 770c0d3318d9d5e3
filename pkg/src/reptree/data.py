"""Datasets, splits, and the sample-removal perturbations replicas train on.

A dataset is a feature matrix plus targets plus stable integer sample ids.
Perturbation derives a replica's dataset from its parent's by deleting a
deterministic window of samples, so sibling replicas see distinct but heavily
overlapping data.  All randomness flows through explicit seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SYNTHETIC_KINDS = ("gaussian_blobs", "regression_linear")
_MIN_PERTURBATION = 0.0
_MAX_PERTURBATION = 100.0


@dataclass
class Dataset:
    """Feature matrix, targets, and stable per-sample integer ids.

    Classification targets are a 1-d int64 vector of labels; regression
    targets are a 2-d float64 matrix, one row per sample.  Sample ids are
    strictly increasing so that subsets keep a recognizable identity through
    folds and perturbation.
    """

    features: np.ndarray
    targets: np.ndarray
    sample_ids: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        targets = np.asarray(self.targets)
        if targets.ndim == 1:
            targets = targets.astype(np.int64)
        else:
            targets = targets.astype(np.float64)
        self.targets = targets
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-d, got shape {self.features.shape}")
        n = self.features.shape[0]
        if self.targets.shape[0] != n or self.sample_ids.shape != (n,):
            raise ValueError(
                f"inconsistent dataset sizes: {n} feature rows, "
                f"{self.targets.shape[0]} targets, {self.sample_ids.size} ids"
            )
        if n > 1 and not np.all(np.diff(self.sample_ids) > 0):
            raise ValueError("sample ids must be strictly increasing")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def is_classification(self) -> bool:
        return self.targets.ndim == 1

    @property
    def target_width(self) -> int:
        return 1 if self.is_classification else self.targets.shape[1]

    def take(self, positions: np.ndarray) -> Dataset:
        """Subset by positional indices (must be ascending)."""
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(
            self.features[positions], self.targets[positions], self.sample_ids[positions]
        )


def generate_synthetic(
    kind: str,
    n: int,
    n_features: int,
    n_outputs: int,
    seed: int,
    *,
    class_sep: float = 2.5,
    noise: float = 0.1,
) -> Dataset:
    """Draw a synthetic dataset.

    ``gaussian_blobs`` produces balanced classes around random centers whose
    typical pairwise distance is ``class_sep`` while per-class noise has unit
    scale, i.e. separable but overlapping.  ``regression_linear`` produces
    targets from a fixed random linear map of the features plus noise.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}, expected one of {SYNTHETIC_KINDS}")
    if n < 1 or n_features < 1 or n_outputs < 1:
        raise ValueError(f"sizes must be positive, got n={n} f={n_features} k={n_outputs}")
    rng = np.random.default_rng(seed)
    if kind == "gaussian_blobs":
        if n < n_outputs:
            raise ValueError(f"cannot balance {n_outputs} classes over {n} samples")
        base, extra = divmod(n, n_outputs)
        counts = [base + (1 if c < extra else 0) for c in range(n_outputs)]
        labels = np.repeat(np.arange(n_outputs), counts)
        # scale centers so the typical center-to-center distance is class_sep
        centers = rng.normal(size=(n_outputs, n_features)) * (
            class_sep / np.sqrt(2.0 * n_features)
        )
        features = centers[labels] + rng.normal(size=(n, n_features))
        order = rng.permutation(n)
        return Dataset(features[order], labels[order], np.arange(n))
    features = rng.normal(size=(n, n_features))
    mapping = rng.normal(size=(n_features, n_outputs)) / np.sqrt(n_features)
    targets = features @ mapping + noise * rng.normal(size=(n, n_outputs))
    return Dataset(features, targets, np.arange(n))


@dataclass(frozen=True)
class CsvSchema:
    """How to read a CSV file into a dataset."""

    label_column: int
    feature_columns: tuple[int, ...] | None = None
    header: bool = False
    kind: str = "classification"
    n_classes: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"unknown csv kind {self.kind!r}")
        if self.feature_columns is not None:
            object.__setattr__(self, "feature_columns", tuple(self.feature_columns))


def load_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    """Read a numeric CSV into a dataset according to ``schema``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing csv file: {path}")
    with path.open(newline="") as handle:
        rows = list(csv.reader(handle))
    if schema.header and rows:
        rows = rows[1:]
    rows = [row for row in rows if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    width = len(rows[0])
    feature_cols = schema.feature_columns
    if feature_cols is None:
        feature_cols = tuple(c for c in range(width) if c != schema.label_column)
    parsed = np.empty((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ValueError(f"{path}: row {i} has {len(row)} cells, expected {width}")
        for j, cell in enumerate(row):
            try:
                parsed[i, j] = float(cell)
            except ValueError:
                raise ValueError(
                    f"{path}: non-numeric value {cell.strip()!r} at row {i}, column {j}"
                ) from None
    features = parsed[:, list(feature_cols)]
    raw_labels = parsed[:, schema.label_column]
    if schema.kind == "classification":
        labels = raw_labels.astype(np.int64)
        if not np.all(labels == raw_labels):
            raise ValueError(f"{path}: classification labels must be integers")
        if schema.n_classes is not None and (
            labels.min() < 0 or labels.max() >= schema.n_classes
        ):
            raise ValueError(
                f"{path}: label range [{labels.min()}, {labels.max()}] outside "
                f"[0, {schema.n_classes})"
            )
        return Dataset(features, labels, np.arange(len(rows)))
    return Dataset(features, raw_labels[:, None], np.arange(len(rows)))


def save_csv(dataset: Dataset, path: str | Path, *, header: bool = True) -> None:
    """Write a dataset as CSV with the label/target in column 0."""
    if not dataset.is_classification and dataset.target_width != 1:
        raise ValueError("csv export supports a single target column")
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        if header:
            writer.writerow(["label"] + [f"f{j}" for j in range(dataset.n_features)])
        for i in range(dataset.n):
            if dataset.is_classification:
                label = int(dataset.targets[i])
            else:
                label = repr(float(dataset.targets[i, 0]))
            writer.writerow([label] + [repr(float(v)) for v in dataset.features[i]])


@dataclass
class SplitPlan:
    """Fold assignment over one dataset's sample positions."""

    n_folds: int
    fold_of: np.ndarray
    seed: int

    def fold_positions(self, fold: int) -> np.ndarray:
        if not 0 <= fold < self.n_folds:
            raise ValueError(f"fold {fold} outside [0, {self.n_folds})")
        return np.flatnonzero(self.fold_of == fold)

    def client_test_folds(self, config_index: int, n_clients: int) -> tuple[list[int], int]:
        """Fold roles for one cross-validation configuration.

        Client i reads fold (i + config_index) mod n_folds; the next fold in
        the rotation is the shared test set.
        """
        if n_clients >= self.n_folds:
            raise ValueError(
                f"{n_clients} clients need at least {n_clients + 1} folds, have {self.n_folds}"
            )
        client_folds = [(i + config_index) % self.n_folds for i in range(n_clients)]
        return client_folds, (n_clients + config_index) % self.n_folds


def kfold_assign(dataset: Dataset, folds: int, seed: int, stratified: bool = False) -> SplitPlan:
    """Randomly deal samples into folds of near-equal size.

    Stratified assignment deals each class along a shared fold cursor, which
    keeps per-fold class counts within one sample of proportional while fold
    sizes still differ by at most one.
    """
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if folds > dataset.n:
        raise ValueError(f"cannot split {dataset.n} samples into {folds} folds")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(dataset.n, dtype=np.int64)
    if stratified:
        if not dataset.is_classification:
            raise ValueError("stratified folds require classification targets")
        cursor = 0
        for label in np.unique(dataset.targets):
            members = rng.permutation(np.flatnonzero(dataset.targets == label))
            for pos in members:
                fold_of[pos] = cursor % folds
                cursor += 1
    else:
        for slot, pos in enumerate(rng.permutation(dataset.n)):
            fold_of[pos] = slot % folds
    return SplitPlan(folds, fold_of, seed)


def _removal_count(p: float, n: int) -> int:
    if not _MIN_PERTURBATION < p < _MAX_PERTURBATION:
        raise ValueError(f"perturbation percentage must be in (0, 100), got {p}")
    k = int(np.floor(p * n / 100.0))
    if k == 0:
        raise ValueError(f"perturbation of {p}% removes no samples from {n}")
    if k >= n:
        raise ValueError(f"perturbation of {p}% would remove all {n} samples")
    return k


def _window(start: int, length: int, modulo: int) -> np.ndarray:
    return (start + np.arange(length)) % modulo


def perturb_random(parent: Dataset, p: float, replica_index: int) -> Dataset:
    """Delete a rotating window of samples from the parent dataset.

    Replica l removes the k = floor(p * n / 100) consecutive positions that
    start at ((l - 1) * k) mod n, wrapping around, so sibling replicas drop
    disjoint-leaning windows while sample order is preserved.
    """
    if replica_index < 1:
        raise ValueError(f"replica indices start at 1, got {replica_index}")
    k = _removal_count(p, parent.n)
    removed = _window((replica_index - 1) * k % parent.n, k, parent.n)
    keep = np.ones(parent.n, dtype=bool)
    keep[removed] = False
    return parent.take(np.flatnonzero(keep))


def largest_remainder_counts(weights: np.ndarray, total: int) -> np.ndarray:
    """Apportion ``total`` into integer parts proportional to ``weights``.

    Floors the exact quotas, then hands the leftover units to the largest
    fractional remainders; remainder ties favor the earlier entry.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if total < 0 or weights.sum() <= 0:
        raise ValueError("apportionment needs a nonnegative total and positive weights")
    quotas = weights * total / weights.sum()
    counts = np.floor(quotas).astype(np.int64)
    leftover = total - int(counts.sum())
    by_remainder = np.argsort(-(quotas - counts), kind="stable")
    counts[by_remainder[:leftover]] += 1
    return counts


def perturb_stratified(parent: Dataset, p: float, replica_index: int, seed: int = 0) -> Dataset:
    """Delete a rotating window per class, preserving label proportions.

    The total removal k = floor(p * n / 100) is apportioned across classes by
    largest remainder, and each class's share is removed as a rotating window
    over that class's positions.  The scheme is fully determined by
    (p, replica_index); ``seed`` is accepted for call-site symmetry with the
    random perturbation but does not influence the outcome.
    """
    del seed
    if replica_index < 1:
        raise ValueError(f"replica indices start at 1, got {replica_index}")
    if not parent.is_classification:
        raise ValueError("stratified perturbation requires classification targets")
    k = _removal_count(p, parent.n)
    labels = np.unique(parent.targets)
    counts = np.array([(parent.targets == label).sum() for label in labels])
    removals = largest_remainder_counts(counts, k)
    keep = np.ones(parent.n, dtype=bool)
    for label, n_c, k_c in zip(labels, counts, removals):
        if k_c >= n_c:
            raise ValueError(
                f"perturbation of {p}% would empty class {label} ({k_c} of {n_c} samples)"
            )
        if k_c == 0:
            continue
        positions = np.flatnonzero(parent.targets == label)
        removed = _window((replica_index - 1) * int(k_c) % int(n_c), int(k_c), int(n_c))
        keep[positions[removed]] = False
    return parent.take(np.flatnonzero(keep))


def concat_datasets(parts: list[Dataset]) -> Dataset:
    """Pool several datasets into one, assigning fresh sample ids."""
    if not parts:
        raise ValueError("nothing to concatenate")
    first = parts[0]
    for part in parts[1:]:
        if part.n_features != first.n_features:
            raise ValueError(
                f"feature widths differ: {first.n_features} vs {part.n_features}"
            )
        if part.is_classification != first.is_classification or (
            part.target_width != first.target_width
        ):
            raise ValueError("datasets have incompatible targets")
    features = np.concatenate([part.features for part in parts])
    targets = np.concatenate([part.targets for part in parts])
    return Dataset(features, targets, np.arange(features.shape[0]))


def slice_targets(dataset: Dataset, start: int, stop: int) -> Dataset:
    """View a regression dataset through a contiguous block of target columns."""
    if dataset.is_classification:
        raise ValueError("target slicing applies to regression datasets")
    if not 0 <= start < stop <= dataset.target_width:
        raise ValueError(
            f"target slice [{start}, {stop}) outside width {dataset.target_width}"
        )
    return Dataset(dataset.features.copy(), dataset.targets[:, start:stop].copy(),
                   dataset.sample_ids.copy())


def subsample(dataset: Dataset, size: int, seed: int, stratified: bool = True) -> Dataset:
    """Deterministically draw ``size`` samples without replacement.

    Stratified draws keep class counts proportional via largest remainder;
    sample order (and therefore id order) is preserved.
    """
    if not 0 < size <= dataset.n:
        raise ValueError(f"cannot draw {size} of {dataset.n} samples")
    rng = np.random.default_rng(seed)
    if stratified and dataset.is_classification:
        labels = np.unique(dataset.targets)
        counts = np.array([(dataset.targets == label).sum() for label in labels])
        shares = largest_remainder_counts(counts, size)
        chosen = [
            rng.permutation(np.flatnonzero(dataset.targets == label))[:share]
            for label, share in zip(labels, shares)
        ]
        positions = np.sort(np.concatenate(chosen))
    else:
        positions = np.sort(rng.permutation(dataset.n)[:size])
    return dataset.take(positions)
