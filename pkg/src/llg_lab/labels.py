"""Label multisets: occurrence counts over the class range 1..n."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class LabelMultiset:
    """counts[i] is the number of occurrences of label i + 1."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or self.counts.size == 0:
            raise ValueError("counts must be a non-empty 1-D vector")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_labels(cls, labels, n_classes: int) -> "LabelMultiset":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 1 or labels.max() > n_classes):
            raise ValueError(f"labels must lie in [1, {n_classes}]")
        return cls(np.bincount(labels - 1, minlength=n_classes))

    @property
    def n_classes(self) -> int:
        return self.counts.size

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def distribution(self) -> np.ndarray:
        total = self.total
        if total == 0:
            raise ValueError("empty multiset has no distribution")
        return self.counts / total

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelMultiset):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)
