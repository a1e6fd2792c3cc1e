"""Confusion matrices and unweighted (macro) F1 / average recall."""

from __future__ import annotations

from typing import Sequence

import numpy as np

CLASS_NAMES = ("negative", "positive", "surprise")


class DegenerateInputError(ValueError):
    pass


def confusion_matrix(
    y_true: Sequence[int], y_pred: Sequence[int], num_classes: int = 3
) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion counts must be non-negative")
    if cm.sum() == 0:
        raise DegenerateInputError("confusion matrix is all zeros")
    return cm


def per_class_f1(cm) -> np.ndarray:
    """F1 per class; a class with no true and no predicted samples scores 0."""
    cm = _check(cm).astype(np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def empty_classes(cm) -> list[int]:
    """Classes where F1 is undefined (no true and no predicted samples)."""
    cm = np.asarray(cm)
    return [c for c in range(cm.shape[0]) if cm[c, :].sum() == 0 and cm[:, c].sum() == 0]


def uf1(cm) -> float:
    return float(per_class_f1(cm).mean())


def uar(cm) -> float:
    cm = _check(cm).astype(np.float64)
    n_c = cm.sum(axis=1)
    if (n_c == 0).any():
        missing = [int(c) for c in np.flatnonzero(n_c == 0)]
        raise DegenerateInputError(f"UAR undefined: no true samples for classes {missing}")
    return float((np.diag(cm) / n_c).mean())
