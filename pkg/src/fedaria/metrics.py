"""Classification metrics shared by federated and centralized evaluation."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ValidationError


def confusion_matrix(preds, labels, num_classes: int) -> np.ndarray:
    """Counts with rows indexed by true class and columns by predicted class."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise DimensionError(f"{preds.size} predictions but {labels.size} labels")
    for arr in (preds, labels):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError("class index out of range")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def balanced_accuracy(cm) -> float:
    """Mean recall over classes that have at least one true sample."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValidationError("confusion matrix must be square")
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        raise ValidationError("confusion matrix is empty")
    recalls = np.diag(cm)[present] / support[present]
    return float(recalls.mean())


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValidationError("confusion matrix is empty")
    return float(np.trace(cm) / total)
