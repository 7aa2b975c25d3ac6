"""Cosine-softmax head: linear squeeze, L2 normalization, scaled cosine logits.

Logits are ``scale * cos(embedding, prototype_c)`` with zero margin. The
scale comes from the fixed AdaCos rule ``sqrt(2) * ln(C - 1)``.

All arithmetic runs in float64 regardless of the parameter dtype; the
parameters themselves are float32 in normal use and float64 in the
replicas used for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..embstore import EmbeddingSet

__all__ = [
    "CosineHead",
    "ClassWeights",
    "Gradients",
    "fixed_adacos_scale",
    "class_weights",
    "init_head",
    "reinit_classifier",
    "forward",
    "forward_batch",
    "log_softmax",
    "weighted_ce_loss",
    "sample_losses",
    "backward",
    "batch_loss_and_grads",
    "extract_embeddings",
]

MIN_CLASSES = 3


def fixed_adacos_scale(num_classes: int) -> float:
    if num_classes < MIN_CLASSES:
        raise ValueError(f"fixed AdaCos scale needs at least {MIN_CLASSES} classes, got {num_classes}")
    return math.sqrt(2.0) * math.log(num_classes - 1)


@dataclass(frozen=True)
class CosineHead:
    proj: np.ndarray  # (d_in, d_emb)
    prototypes: np.ndarray  # (C, d_emb)
    scale: float

    def __post_init__(self):
        proj = np.asarray(self.proj)
        protos = np.asarray(self.prototypes)
        if proj.ndim != 2 or protos.ndim != 2 or proj.shape[1] != protos.shape[1]:
            raise ValueError(f"shape mismatch: proj {proj.shape}, prototypes {protos.shape}")
        if protos.shape[0] < MIN_CLASSES:
            raise ValueError(f"need at least {MIN_CLASSES} classes, got {protos.shape[0]}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not (np.isfinite(proj).all() and np.isfinite(protos).all()):
            raise ValueError("head parameters must be finite")
        object.__setattr__(self, "proj", proj)
        object.__setattr__(self, "prototypes", protos)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def d_in(self) -> int:
        return self.proj.shape[0]

    @property
    def d_emb(self) -> int:
        return self.proj.shape[1]

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    def astype(self, dtype) -> "CosineHead":
        return CosineHead(self.proj.astype(dtype), self.prototypes.astype(dtype), self.scale)


@dataclass(frozen=True)
class Gradients:
    proj: np.ndarray
    prototypes: np.ndarray


class ClassWeights:
    """Per-class loss weights with mean exactly 1 (up to rounding)."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or not len(w):
            raise ValueError("class weights must be a non-empty vector")
        if not (np.isfinite(w).all() and (w > 0).all()):
            raise ValueError("class weights must be positive and finite")
        self.weights = w
        self.weights.setflags(write=False)

    @classmethod
    def uniform(cls, num_classes: int) -> "ClassWeights":
        return cls(np.ones(num_classes))

    def __len__(self) -> int:
        return len(self.weights)

    def __getitem__(self, c):
        return self.weights[c]

    def __repr__(self) -> str:
        return f"ClassWeights({self.weights!r})"


def class_weights(class_counts: Sequence[int], offset: float = 1.0) -> ClassWeights:
    """Inverse-log-frequency weights ``1 / ln(count + offset)``, rescaled to mean 1.

    ``offset=1`` keeps singleton classes finite; ``offset=0`` gives the bare
    ``1 / ln(count)`` rule and then requires every count to exceed 1.
    """
    counts = np.asarray(class_counts)
    if counts.ndim != 1 or not len(counts):
        raise ValueError("class_counts must be a non-empty sequence")
    if (counts < 1).any():
        raise ValueError(f"class counts must be >= 1, got {counts.min()}")
    base = counts.astype(np.float64) + offset
    if (base <= 1.0).any():
        raise ValueError("count + offset must exceed 1 for a finite 1/log weight")
    raw = 1.0 / np.log(base)
    return ClassWeights(raw / raw.mean())


def _gauss(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)


def init_head(d_in: int, d_emb: int, num_classes: int, seed: int) -> CosineHead:
    """Fresh head: i.i.d. N(0, 1/sqrt(fan_in)) entries, fixed AdaCos scale."""
    rng = np.random.default_rng([seed, 0])
    proj = _gauss(rng, (d_in, d_emb), d_in)
    protos = _gauss(np.random.default_rng([seed, 1]), (num_classes, d_emb), d_emb)
    return CosineHead(proj, protos, fixed_adacos_scale(num_classes))


def reinit_classifier(head: CosineHead, new_num_classes: int, seed: int) -> CosineHead:
    """Keep the projection, redraw prototypes for a new class count."""
    scale = fixed_adacos_scale(new_num_classes)
    protos = _gauss(np.random.default_rng([seed, 1]), (new_num_classes, head.d_emb), head.d_emb)
    return CosineHead(head.proj, protos.astype(head.prototypes.dtype), scale)


def _unit_rows(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    if (norms == 0.0).any():
        raise ValueError(f"zero {what} at row {int(np.argmax(norms == 0.0))}")
    return m / norms[:, None], norms


def _prepare(head: CosineHead, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    z = x @ head.proj.astype(np.float64)
    e, zn = _unit_rows(z, "projected vector")
    u, wn = _unit_rows(head.prototypes.astype(np.float64), "prototype")
    cos = e @ u.T
    return x, e, zn, u, wn, cos


def forward_batch(head: CosineHead, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings (n, d_emb) and logits (n, C) for a batch of feature rows."""
    _, e, _, _, _, cos = _prepare(head, np.atleast_2d(x))
    return e, head.scale * cos


def forward(head: CosineHead, x) -> tuple[np.ndarray, np.ndarray]:
    e, logits = forward_batch(head, np.asarray(x, dtype=np.float64)[None, :])
    return e[0], logits[0]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def weighted_ce_loss(logits, label: int, class_w: ClassWeights, sample_w: float = 1.0) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logits")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    a = sample_w * class_w[label]
    return float(a * -log_softmax(logits)[label])


def sample_losses(logits: np.ndarray, labels: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Per-row ``weight * nll``; ``weight`` already folds class and sample weights."""
    if not np.isfinite(logits).all():
        raise ValueError("non-finite logits")
    nll = -log_softmax(logits)[np.arange(len(labels)), labels]
    return weight * nll


def _grads(head, x, e, zn, u, wn, cos, labels, weight, scale_by):
    # d(loss)/d(logits) = w * (softmax - onehot)
    p = np.exp(log_softmax(head.scale * cos))
    p[np.arange(len(labels)), labels] -= 1.0
    g = (weight * scale_by)[:, None] * p
    g_cos = head.scale * g
    g_e = g_cos @ u
    g_z = (g_e - e * np.einsum("ij,ij->i", e, g_e)[:, None]) / zn[:, None]
    g_u = g_cos.T @ e
    g_w = (g_u - u * np.einsum("ij,ij->i", u, g_u)[:, None]) / wn[:, None]
    return Gradients(x.T @ g_z, g_w)


def _check_labels(head: CosineHead, labels: np.ndarray) -> None:
    if labels.size and (labels.min() < 0 or labels.max() >= head.num_classes):
        raise ValueError(f"labels out of range for {head.num_classes} classes")


def backward(head: CosineHead, x, label: int, class_w: ClassWeights, sample_w: float = 1.0) -> Gradients:
    """Analytic gradient of ``weighted_ce_loss(forward(head, x)[1], ...)``."""
    labels = np.array([label])
    _check_labels(head, labels)
    parts = _prepare(head, np.asarray(x, dtype=np.float64)[None, :])
    weight = np.array([sample_w * class_w[label]], dtype=np.float64)
    return _grads(head, *parts, labels, weight, 1.0)


def batch_loss_and_grads(
    head: CosineHead,
    x: np.ndarray,
    labels: np.ndarray,
    class_w: ClassWeights,
    sample_w: np.ndarray,
) -> tuple[float, np.ndarray, Gradients]:
    """Batch-mean weighted loss, per-sample losses and batch-mean gradients."""
    labels = np.asarray(labels, dtype=np.int64)
    if not len(labels):
        raise ValueError("empty batch")
    _check_labels(head, labels)
    parts = _prepare(head, x)
    weight = np.asarray(sample_w, dtype=np.float64) * class_w[labels]
    losses = sample_losses(head.scale * parts[-1], labels, weight)
    grads = _grads(head, *parts, labels, weight, 1.0 / len(labels))
    return float(losses.sum() / len(labels)), losses, grads


def extract_embeddings(head: CosineHead, features: np.ndarray, ids: Sequence[str]) -> EmbeddingSet:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        return EmbeddingSet.empty(head.d_emb, normalized=True)
    if features.ndim != 2 or features.shape[1] != head.d_in:
        raise ValueError(f"features shape {features.shape} does not match d_in {head.d_in}")
    z = features @ head.proj.astype(np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    if (norms == 0.0).any():
        raise ValueError(f"zero projected vector for id {ids[int(np.argmax(norms == 0.0))]!r}")
    return EmbeddingSet(tuple(ids), (z / norms[:, None]).astype(np.float32), True)
