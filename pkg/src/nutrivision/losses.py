"""Mean absolute error, its per-task breakdown, and its subgradient.

All losses operate on float64 numpy arrays shaped (B, 5) with columns in
fixed task order. The combined metric is the plain (unweighted) sum of the
five per-task MAEs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import NUM_TASKS, TASKS


def _validate_pair(targets: np.ndarray, predictions: np.ndarray, ndim: int) -> tuple[np.ndarray, np.ndarray]:
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    if targets.shape != predictions.shape:
        raise ValueError(
            f"targets and predictions must have equal shapes, got {targets.shape} and {predictions.shape}"
        )
    if targets.ndim != ndim:
        raise ValueError(f"expected {ndim}-dimensional arrays, got shape {targets.shape}")
    if targets.size == 0:
        raise ValueError("cannot compute a loss over zero samples")
    if not (np.isfinite(targets).all() and np.isfinite(predictions).all()):
        raise ValueError("targets and predictions must be finite")
    return targets, predictions


def mae(targets: np.ndarray, predictions: np.ndarray) -> float:
    """Mean absolute error over paired 1-D arrays."""
    targets, predictions = _validate_pair(targets, predictions, ndim=1)
    return float(np.mean(np.abs(targets - predictions)))


@dataclass(frozen=True)
class LossBreakdown:
    """Per-task MAEs plus their sum.

    ``total`` is redundant by construction; the invariant
    total == sum(per_task) is enforced at creation.
    """

    per_task: tuple[float, float, float, float, float]
    total: float

    def __post_init__(self):
        if len(self.per_task) != NUM_TASKS:
            raise ValueError(f"expected {NUM_TASKS} per-task values, got {len(self.per_task)}")
        for value in self.per_task:
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"per-task MAE must be finite and non-negative, got {value!r}")
        expected = sum(self.per_task)
        if not np.isclose(self.total, expected, rtol=1e-9, atol=0.0):
            raise ValueError(f"total {self.total!r} != sum of per-task values {expected!r}")

    def as_dict(self) -> dict[str, float]:
        return dict(zip(TASKS, self.per_task))


def multitask_loss(targets: np.ndarray, predictions: np.ndarray) -> LossBreakdown:
    """Per-task MAE over (B, 5) arrays, combined as an unweighted sum."""
    targets, predictions = _validate_pair(targets, predictions, ndim=2)
    if targets.shape[1] != NUM_TASKS:
        raise ValueError(f"expected {NUM_TASKS} task columns, got {targets.shape[1]}")
    per_task = np.mean(np.abs(targets - predictions), axis=0)
    return LossBreakdown(per_task=tuple(float(v) for v in per_task), total=float(per_task.sum()))


def loss_gradient(targets: np.ndarray, predictions: np.ndarray) -> np.ndarray:
    """Subgradient of the combined loss with respect to predictions.

    Elementwise sign(prediction - target) / B, with 0 at the kink where
    prediction == target. Shape matches the inputs.
    """
    targets, predictions = _validate_pair(targets, predictions, ndim=2)
    if targets.shape[1] != NUM_TASKS:
        raise ValueError(f"expected {NUM_TASKS} task columns, got {targets.shape[1]}")
    return np.sign(predictions - targets) / targets.shape[0]
