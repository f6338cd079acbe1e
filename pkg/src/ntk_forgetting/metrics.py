"""Average accuracy / forgetting measure over a task-by-checkpoint matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FeatureMap, predict
from .tasks import TaskDataset

KINDS = ("accuracy", "neg_loss")


@dataclass(frozen=True)
class EvalMatrix:
    """``values[l-1, t-1]`` is the metric of task t after training task l (l >= t).

    Entries above the diagonal are unused and may be NaN.
    """

    values: np.ndarray
    kind: str = "accuracy"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"evaluation matrix must be square, got shape {v.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        lower = v[np.tril_indices(v.shape[0])]
        if self.kind == "accuracy" and np.any((lower < 0) | (lower > 1)):
            raise ValueError("accuracies must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def T(self) -> int:
        return self.values.shape[0]


def average_accuracy(E: EvalMatrix) -> float:
    """Mean of the final row (every task measured after the last one)."""
    final = E.values[-1]
    if np.any(np.isnan(final)):
        raise ValueError("final row of the evaluation matrix has missing entries")
    return float(np.mean(final))


def forgetting_measure(E: EvalMatrix) -> float:
    """Average over tasks t < T of ``max_{l >= t} a[l, t] - a[T, t]``."""
    T = E.T
    if T < 2:
        raise ValueError("the forgetting measure needs at least two tasks")
    a = E.values
    gaps = []
    for t in range(T - 1):
        col = a[t:, t]
        if np.any(np.isnan(col)):
            raise ValueError(f"missing entries for task {t + 1}")
        gaps.append(col.max() - col[-1])
    return float(np.mean(gaps))


def evaluate(fmap: FeatureMap, weights, task: TaskDataset, kind: str = "neg_loss") -> float:
    """Accuracy (argmax match) for classification, or minus the mean squared error."""
    P = predict(fmap, weights, task.features)
    if kind == "accuracy":
        if not task.is_classification:
            raise ValueError("accuracy needs one-hot classification labels")
        return float(np.mean(np.argmax(P, axis=1) == task.true_class()))
    if kind == "neg_loss":
        return -float(np.mean(np.sum((P - task.labels) ** 2, axis=1)))
    raise ValueError(f"kind must be one of {KINDS}")


def eval_matrix(fmap: FeatureMap, optima, sequence, kind: str = "neg_loss") -> EvalMatrix:
    """Fill the lower triangle from per-task optima ``optima[1..T]``."""
    T = len(sequence)
    vals = np.full((T, T), np.nan)
    for l in range(1, T + 1):
        for t in range(1, l + 1):
            vals[l - 1, t - 1] = evaluate(fmap, optima[l], sequence[t], kind)
    return EvalMatrix(vals, kind)
