"""Test-set evaluation for both model heads.

Classification metrics are percentages in [0, 100]; sensitivity, specificity,
and F1 are macro averages over one-vs-rest views of every class the model can
emit.  A class with an empty denominator contributes zero, which keeps the
macro average conservative when a class is missing from the test fold.
Regression reports the mean absolute elementwise error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .models import ModelParams, forward


@dataclass
class MetricSet:
    """Evaluation results; fields that do not apply to the head stay None."""

    accuracy: float | None = None
    macro_f1: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    mae: float | None = None

    @property
    def primary(self) -> float:
        """Accuracy for classifiers, MAE for regressors."""
        return self.accuracy if self.accuracy is not None else self.mae

    def as_dict(self) -> dict[str, float]:
        return {key: value for key, value in asdict(self).items() if value is not None}


def per_client_tests(
    test_data: Dataset | list[Dataset] | tuple[Dataset, ...] | None, n_clients: int
) -> list[Dataset | None]:
    """Normalize a test-data argument to one (possibly shared) set per client."""
    if test_data is None:
        return [None] * n_clients
    if isinstance(test_data, Dataset):
        return [test_data] * n_clients
    tests = list(test_data)
    if len(tests) != n_clients:
        raise ValueError(f"{len(tests)} test sets for {n_clients} clients")
    return tests


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator > 0 else 0.0


def evaluate(model: ModelParams, test: Dataset) -> MetricSet:
    """Score a model on held-out data."""
    if test.n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    scores = forward(model, test.features)
    if model.head == "classification":
        if not test.is_classification:
            raise ValueError("classification model evaluated against regression targets")
        labels = test.targets
        predictions = scores.argmax(axis=1)
        accuracy = float(np.mean(predictions == labels))
        recalls, specificities, f1s = [], [], []
        for cls in range(model.n_outputs):
            actual = labels == cls
            predicted = predictions == cls
            tp = float(np.sum(actual & predicted))
            fp = float(np.sum(~actual & predicted))
            fn = float(np.sum(actual & ~predicted))
            tn = float(np.sum(~actual & ~predicted))
            recalls.append(_ratio(tp, tp + fn))
            specificities.append(_ratio(tn, tn + fp))
            f1s.append(_ratio(2 * tp, 2 * tp + fp + fn))
        return MetricSet(
            accuracy=100.0 * accuracy,
            macro_f1=100.0 * float(np.mean(f1s)),
            sensitivity=100.0 * float(np.mean(recalls)),
            specificity=100.0 * float(np.mean(specificities)),
        )
    if test.is_classification:
        raise ValueError("regression model evaluated against classification targets")
    if test.target_width != model.n_outputs:
        raise ValueError(
            f"model emits {model.n_outputs} outputs but targets have "
            f"{test.target_width} columns"
        )
    return MetricSet(mae=float(np.mean(np.abs(scores - test.targets))))
