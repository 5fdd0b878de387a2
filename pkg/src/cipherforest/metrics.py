"""Classification metrics and prediction-agreement rates."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError


def classification_metrics(y_true, y_pred, positive_class: int = 1) -> dict:
    """Accuracy plus precision/recall/F1 of the designated positive class."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise DimensionError("prediction vectors differ in length")
    accuracy = float((y_true == y_pred).mean())
    tp = int(((y_pred == positive_class) & (y_true == positive_class)).sum())
    fp = int(((y_pred == positive_class) & (y_true != positive_class)).sum())
    fn = int(((y_pred != positive_class) & (y_true == positive_class)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": accuracy,
        "precision": float(precision),
        "recall": float(recall),
        "f1": float(f1),
    }


def agreement(preds_a, preds_b) -> float:
    """Fraction of identical predictions on identical inputs."""
    a = np.asarray(preds_a)
    b = np.asarray(preds_b)
    if a.shape != b.shape:
        raise DimensionError(
            f"agreement needs equal-length vectors, got {a.shape} vs {b.shape}"
        )
    if len(a) == 0:
        raise DimensionError("agreement of empty prediction vectors is undefined")
    return float((a == b).mean())
