"""Segmentation metrics: confusion-matrix accumulation and mean IoU."""

from __future__ import annotations

import numpy as np

from .scenes import IGNORE


class ConfusionMatrix:
    """K x K pixel counts, rows = ground truth, cols = prediction."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred: np.ndarray, true: np.ndarray) -> "ConfusionMatrix":
        """Accumulate one prediction/truth pair; ignore pixels are skipped."""
        pred = np.asarray(pred).reshape(-1)
        true = np.asarray(true).reshape(-1)
        if pred.shape != true.shape:
            raise ValueError("prediction and truth shapes differ")
        keep = true != IGNORE
        pred, true = pred[keep], true[keep]
        k = self.num_classes
        if pred.size and (pred.max() >= k or pred.min() < 0 or true.max() >= k):
            raise ValueError(f"labels outside [0, {k})")
        self.counts += np.bincount(true * k + pred, minlength=k * k).reshape(k, k).astype(np.int64)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        self.counts += other.counts
        return self


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU and their mean.

    Classes absent from both prediction and truth (zero union) get NaN and are
    excluded from the mean; an entirely empty matrix is an error.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    c = cm.counts.astype(np.float64)
    inter = np.diag(c)
    union = c.sum(axis=1) + c.sum(axis=0) - inter
    per_class = np.full(cm.num_classes, np.nan)
    valid = union > 0
    if not valid.any():
        raise ValueError("no class has a nonzero union")
    per_class[valid] = inter[valid] / union[valid]
    return per_class, float(per_class[valid].mean())
