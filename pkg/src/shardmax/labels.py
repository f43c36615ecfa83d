"""Sparse per-instance label assignments.

A batch's labels are: the positive class at mass 1 - alpha, each of the
k hardest negative classes at mass alpha / k, zero elsewhere. alpha = 0 or
k = 0 degenerates to one-hot. Masses are shared across rows; only the class
indices differ per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SmoothedLabelSet:
    num_classes: int
    positives: np.ndarray   # (B,) int64 global class ids
    negatives: np.ndarray   # (B, k) int64 global class ids, k may be 0
    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "positives", np.ascontiguousarray(self.positives, np.int64))
        object.__setattr__(self, "negatives", np.ascontiguousarray(self.negatives, np.int64))
        if self.negatives.ndim != 2 or self.negatives.shape[0] != self.positives.shape[0]:
            raise ValueError("negatives must be (batch, k)")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must be in [0, 1), got {self.alpha}")
        if self.positives.size == 0:
            raise ValueError("empty label batch")
        if self.positives.min() < 0 or self.positives.max() >= self.num_classes:
            raise ValueError("positive class id outside [0, num_classes)")
        if self.negatives.size and (
            self.negatives.min() < 0 or self.negatives.max() >= self.num_classes
        ):
            raise ValueError("negative class id outside [0, num_classes)")

    @property
    def batch_size(self) -> int:
        return self.positives.shape[0]

    @property
    def k(self) -> int:
        return self.negatives.shape[1]

    @property
    def positive_mass(self) -> float:
        return 1.0 - self.alpha if self.k > 0 else 1.0

    @property
    def negative_mass(self) -> float:
        return self.alpha / self.k if self.k > 0 else 0.0

    def row_mass(self) -> float:
        return self.positive_mass + self.k * self.negative_mass

    def is_one_hot(self) -> bool:
        return self.k == 0 or self.alpha == 0.0

    def to_dense(self) -> np.ndarray:
        """(B, num_classes) float64 matrix form, mostly for oracles and export."""
        out = np.zeros((self.batch_size, self.num_classes))
        rows = np.arange(self.batch_size)
        out[rows, self.positives] = self.positive_mass
        for k in range(self.k):
            out[rows, self.negatives[:, k]] += self.negative_mass
        return out


def one_hot(instance_ids, num_classes: int) -> SmoothedLabelSet:
    ids = np.ascontiguousarray(instance_ids, np.int64)
    return SmoothedLabelSet(
        num_classes=num_classes,
        positives=ids,
        negatives=np.zeros((ids.shape[0], 0), np.int64),
        alpha=0.0,
    )
