"""Mini-batch SGD (momentum + L2 weight decay, constant learning rate) for a CosineHead."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .head import ClassWeights, CosineHead, Gradients, batch_loss_and_grads, class_weights
from .synthetic import LabeledEmbeddings

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainResult",
    "TrainingDivergedError",
    "sgd_step",
    "zero_velocity",
    "evaluate_loss",
    "train",
    "class_weights_for",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    head: CosineHead
    trace: list[EpochStats] = field(default_factory=list)
    first_batch_loss: float | None = None


class TrainingDivergedError(RuntimeError):
    pass


def zero_velocity(head: CosineHead) -> Gradients:
    return Gradients(np.zeros(head.proj.shape), np.zeros(head.prototypes.shape))


def sgd_step(
    head: CosineHead, grads: Gradients, velocity: Gradients | None, config: TrainConfig
) -> tuple[CosineHead, Gradients]:
    """One update: g' = g + wd*theta; v = mu*v + g'; theta -= lr*v."""
    if velocity is None:
        velocity = zero_velocity(head)
    new_params, new_v = [], []
    for theta, g, v in (
        (head.proj, grads.proj, velocity.proj),
        (head.prototypes, grads.prototypes, velocity.prototypes),
    ):
        if not (theta.shape == np.shape(g) == np.shape(v)):
            raise ValueError(f"shape mismatch: param {theta.shape}, grad {np.shape(g)}, velocity {np.shape(v)}")
        t64 = theta.astype(np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            v = config.momentum * np.asarray(v, dtype=np.float64) + (g + config.weight_decay * t64)
            updated = (t64 - config.learning_rate * v).astype(theta.dtype)
        if not np.isfinite(updated).all():
            raise TrainingDivergedError("update produced non-finite parameters")
        new_params.append(updated)
        new_v.append(v)
    return CosineHead(new_params[0], new_params[1], head.scale), Gradients(*new_v)


def class_weights_for(data: LabeledEmbeddings, num_classes: int) -> ClassWeights:
    """Inverse-log weights from observed label counts; absent classes count as 1."""
    counts = np.bincount(data.labels, minlength=num_classes)
    return class_weights(np.maximum(counts, 1))


def evaluate_loss(
    head: CosineHead,
    data: LabeledEmbeddings,
    class_w: ClassWeights | None = None,
    weighted: bool = True,
    batch_size: int = 4096,
) -> float:
    """Mean loss over ``data``; ``weighted=False`` gives plain cross entropy."""
    if not len(data):
        raise ValueError("empty dataset")
    cw = class_w if (weighted and class_w is not None) else ClassWeights.uniform(head.num_classes)
    total = 0.0
    for lo in range(0, len(data), batch_size):
        sl = slice(lo, lo + batch_size)
        sw = data.sample_weights[sl] if weighted else np.ones(len(data.labels[sl]))
        _, losses, _ = batch_loss_and_grads(head, data.features[sl], data.labels[sl], cw, sw)
        total += float(losses.sum())
    return total / len(data)


def _check_finite(loss: float, epoch: int, batch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


def train(
    head: CosineHead,
    data: LabeledEmbeddings,
    val: LabeledEmbeddings,
    config: TrainConfig,
    class_w: ClassWeights | None = None,
) -> TrainResult:
    """Seeded-shuffle mini-batch training.

    ``trace[0]`` holds the losses of the untrained head (epoch 0); each later
    entry has the mean weighted loss over that epoch's batches and the
    unweighted validation loss after the epoch. Batch losses are means over
    the batch.
    """
    if not len(data) or not len(val):
        raise ValueError("train and validation sets must be non-empty")
    for name, d in (("train", data), ("validation", val)):
        if d.labels.max() >= head.num_classes:
            raise ValueError(f"{name} labels exceed the head's {head.num_classes} classes")
        if d.features.shape[1] != head.d_in:
            raise ValueError(f"{name} features have dim {d.features.shape[1]}, head expects {head.d_in}")
    if class_w is None:
        class_w = class_weights_for(data, head.num_classes)

    result = TrainResult(head)
    result.trace.append(
        EpochStats(0, evaluate_loss(head, data, class_w), evaluate_loss(head, val, weighted=False))
    )
    rng = np.random.default_rng(config.seed)
    velocity = zero_velocity(head)
    n = len(data)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            loss, losses, grads = batch_loss_and_grads(
                head, data.features[idx], data.labels[idx], class_w, data.sample_weights[idx]
            )
            _check_finite(loss, epoch, b)
            if result.first_batch_loss is None:
                result.first_batch_loss = loss
            total += float(losses.sum())
            try:
                head, velocity = sgd_step(head, grads, velocity, config)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"{exc} at epoch {epoch}, batch {b}") from None
        val_loss = evaluate_loss(head, val, weighted=False)
        _check_finite(val_loss, epoch, -1)
        result.trace.append(EpochStats(epoch, total / n, val_loss))
    result.head = head
    return result
