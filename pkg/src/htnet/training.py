"""Class-weighted cross-entropy training with bias-corrected Adam."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from .model import HTNet
from .tensor import Tensor, log_softmax, parameters_norm

log = logging.getLogger(__name__)


class DegenerateSplitError(ValueError):
    """A class has no training samples."""


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, param_norm: float):
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} (parameter norm {param_norm:.6g})"
        )
        self.epoch = epoch
        self.batch = batch
        self.param_norm = param_norm


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 800
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.adam_eps <= 0:
            raise ValueError("betas must lie in [0, 1) and adam_eps be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**obj)


def class_counts(labels: Sequence[int], num_classes: int = 3) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=int), minlength=num_classes)


def weights_from_counts(counts: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights ``N / (C * n_c)``; balanced data gives ones."""
    n_c = np.asarray(counts, dtype=np.float64)
    if (n_c <= 0).any():
        empty = [int(c) for c in np.flatnonzero(n_c <= 0)]
        raise DegenerateSplitError(f"no training samples for classes {empty}")
    return n_c.sum() / (len(n_c) * n_c)


def class_weights(labels: Sequence[int], num_classes: int = 3) -> np.ndarray:
    return weights_from_counts(class_counts(labels, num_classes))


def weighted_cross_entropy(
    logits: Tensor, labels: Sequence[int], weights: Sequence[float]
) -> Tensor:
    """Batch mean of ``-w[y] * log softmax(logits)[y]``."""
    labels = np.asarray(labels, dtype=int)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
        labels = labels.reshape(1)
    picked = log_softmax(logits)[np.arange(len(labels)), labels]
    w = np.asarray(weights, dtype=np.float64)[labels]
    return -(picked * w).mean()


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class FitResult:
    model: HTNet
    losses: list[float]
    class_weights: np.ndarray


def fit(
    model: HTNet,
    images: np.ndarray,
    labels: Sequence[int],
    cfg: TrainConfig,
    weights: Sequence[float] | None = None,
    on_epoch: Callable[[int, float], bool] | None = None,
) -> FitResult:
    """Train ``model`` in place; returns it with the per-epoch mean loss.

    ``on_epoch(epoch, loss)`` runs after every epoch; returning True stops early.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if len(images) == 0 or len(images) != len(labels):
        raise ValueError(f"need matching non-empty images/labels, got {len(images)}/{len(labels)}")
    num_classes = model.cfg.num_classes
    w = (
        class_weights(labels, num_classes)
        if weights is None
        else np.asarray(weights, dtype=np.float64)
    )
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.parameters(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    losses: list[float] = []
    n = len(images)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            model.zero_grad()
            loss = weighted_cross_entropy(model(images[idx]), labels[idx], w)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, b, parameters_norm(model.parameters()))
            loss.backward()
            opt.step()
            total += value * len(idx)
        losses.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, losses[-1])
        if on_epoch is not None and on_epoch(epoch, losses[-1]):
            break
    model.zero_grad()
    return FitResult(model, losses, w)


def accuracy(model: HTNet, images: np.ndarray, labels: Sequence[int]) -> float:
    return float((model.predict(images) == np.asarray(labels)).mean())
