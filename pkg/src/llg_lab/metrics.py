"""Attack-quality and model-quality measurement."""

from __future__ import annotations

import numpy as np

from .data import ClientDataset
from .labels import LabelMultiset
from .nn import Network


def attack_success_rate(extracted: LabelMultiset, truth: LabelMultiset) -> float:
    """Multiset overlap between extraction and ground truth, over |D|."""
    if extracted.n_classes != truth.n_classes:
        raise ValueError("multisets cover different class ranges")
    if extracted.total != truth.total or truth.total == 0:
        raise ValueError(
            f"multiset totals must match and be positive "
            f"(got {extracted.total} vs {truth.total})"
        )
    overlap = np.minimum(extracted.counts, truth.counts).sum()
    return float(overlap / truth.total)


def hellinger(p: LabelMultiset, q: LabelMultiset) -> float:
    """Hellinger distance between the two normalized label distributions."""
    if p.n_classes != q.n_classes:
        raise ValueError("multisets cover different class ranges")
    diff = np.sqrt(p.distribution()) - np.sqrt(q.distribution())
    return float(min(1.0, np.linalg.norm(diff) / np.sqrt(2.0)))


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length 1-D sequences with >= 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float((xc * xc).sum())
    sy = float((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation is undefined for zero-variance input")
    return float((xc * yc).sum() / np.sqrt(sx * sy))


def test_accuracy(net: Network, dataset: ClientDataset, chunk: int = 1024) -> float:
    """Fraction of samples whose argmax prediction matches the label."""
    if len(dataset) == 0:
        raise ValueError("test set must be non-empty")
    correct = 0
    for start in range(0, len(dataset), chunk):
        xs = dataset.xs[start:start + chunk]
        logits, _ = net.forward(xs)
        predicted = logits.argmax(axis=1) + 1
        correct += int((predicted == dataset.ys[start:start + chunk]).sum())
    return correct / len(dataset)
