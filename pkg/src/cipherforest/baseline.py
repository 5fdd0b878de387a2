"""L2-regularized multinomial logistic regression, the linear baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UnsupportedTaskError
from .forest import Dataset
from .neural import xent_loss_grad


@dataclass
class LogisticModel:
    weights: np.ndarray  # (C, d)
    bias: np.ndarray     # (C,)

    def scores(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.weights.T + self.bias

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(x), axis=1)


def loss_grad(weights, bias, feats, targets, l2: float):
    loss, gw, gb = xent_loss_grad(weights, bias, feats, targets)
    return loss + 0.5 * l2 * float(np.square(weights).sum()), gw + l2 * weights, gb


def train_logistic(
    data: Dataset,
    l2: float = 1e-4,
    lr: float = 1.0,
    epochs: int = 400,
    rng_seed: int = 0,
) -> LogisticModel:
    """Full-batch gradient descent from zero init; deterministic given the
    data (the seed is accepted for interface uniformity)."""
    if data.task != "classification":
        raise UnsupportedTaskError("logistic baseline requires classification data")
    c = data.n_classes
    onehot = np.zeros((data.n_rows, c))
    onehot[np.arange(data.n_rows), data.labels] = 1.0
    weights = np.zeros((c, data.n_features))
    bias = np.zeros(c)
    for _ in range(epochs):
        _, gw, gb = loss_grad(weights, bias, data.features, onehot, l2)
        weights -= lr * gw
        bias -= lr * gb
    return LogisticModel(weights=weights, bias=bias)
