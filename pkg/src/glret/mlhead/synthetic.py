"""Labeled feature sets and a seeded synthetic landmark-like generator.

The generator stands in for a large, noisy landmark train set: class
centers on the unit sphere, Gaussian jitter around them, a fraction of
labels flipped to a wrong class. The first ``clean_classes`` classes form
the clean view; a sample is tagged clean when its true class is one of
those and its label was left intact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = ["LabeledEmbeddings", "SyntheticDataset", "gen_synthetic", "default_clean_classes"]

CLEAN_CLASS_FRACTION = 0.4


@dataclass(frozen=True)
class LabeledEmbeddings:
    features: np.ndarray  # (n, d_in) float32
    labels: np.ndarray  # (n,) int64
    sample_weights: np.ndarray  # (n,) float64, > 0
    clean: np.ndarray  # (n,) bool

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float32)
        lab = np.asarray(self.labels, dtype=np.int64)
        sw = np.asarray(self.sample_weights, dtype=np.float64)
        cl = np.asarray(self.clean, dtype=bool)
        if f.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {f.shape}")
        n = f.shape[0]
        if not (lab.shape == sw.shape == cl.shape == (n,)):
            raise ValueError("labels, sample_weights and clean must have one entry per row")
        if (lab < 0).any():
            raise ValueError("labels must be non-negative")
        if not (np.isfinite(sw).all() and (sw > 0).all()):
            raise ValueError("sample weights must be positive and finite")
        for name, v in (("features", f), ("labels", lab), ("sample_weights", sw), ("clean", cl)):
            object.__setattr__(self, name, v)

    @classmethod
    def from_arrays(cls, features, labels, clean=None, sample_weights=None) -> "LabeledEmbeddings":
        n = len(labels)
        return cls(
            features,
            labels,
            np.ones(n) if sample_weights is None else sample_weights,
            np.ones(n, dtype=bool) if clean is None else clean,
        )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def split_tag(self) -> list[str]:
        return ["clean" if c else "noisy" for c in self.clean]

    def num_classes_seen(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, mask) -> "LabeledEmbeddings":
        return LabeledEmbeddings(
            self.features[mask], self.labels[mask], self.sample_weights[mask], self.clean[mask]
        )

    def with_clean_weight(self, weight: float) -> "LabeledEmbeddings":
        """Clean samples get ``weight``, noisy ones 1.0."""
        return replace(self, sample_weights=np.where(self.clean, float(weight), 1.0))


@dataclass(frozen=True)
class SyntheticDataset:
    data: LabeledEmbeddings
    true_labels: np.ndarray
    centers: np.ndarray
    clean_classes: int

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


def default_clean_classes(num_classes: int) -> int:
    return max(3, int(round(CLEAN_CLASS_FRACTION * num_classes)))


def gen_synthetic(
    num_classes: int,
    d_in: int,
    samples_per_class: tuple[int, int],
    noise_sigma: float,
    label_noise_fraction: float,
    seed: int,
    clean_classes: int | None = None,
) -> SyntheticDataset:
    """Draw a labeled feature set; ``samples_per_class`` is an inclusive range.

    Samples are ordered by true class. Exactly
    ``floor(label_noise_fraction * n)`` samples get a uniformly drawn wrong
    label.
    """
    lo, hi = samples_per_class
    if num_classes < 3:
        raise ValueError(f"need at least 3 classes, got {num_classes}")
    if d_in < 1:
        raise ValueError("d_in must be positive")
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid samples_per_class range {samples_per_class}")
    if not 0.0 <= label_noise_fraction < 1.0:
        raise ValueError(f"label_noise_fraction must be in [0, 1), got {label_noise_fraction}")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    if clean_classes is None:
        clean_classes = default_clean_classes(num_classes)
    if not 3 <= clean_classes <= num_classes:
        raise ValueError(f"clean_classes must be in [3, {num_classes}], got {clean_classes}")

    # independent streams so changing one knob does not reshuffle the rest
    r_center, r_count, r_noise, r_label = (np.random.default_rng([seed, i]) for i in range(4))
    centers = r_center.standard_normal((num_classes, d_in))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    counts = r_count.integers(lo, hi, endpoint=True, size=num_classes)
    true_labels = np.repeat(np.arange(num_classes, dtype=np.int64), counts)
    n = true_labels.shape[0]
    jitter = r_noise.standard_normal((n, d_in)) * noise_sigma
    features = (centers[true_labels] + jitter).astype(np.float32)

    labels = true_labels.copy()
    n_flip = int(np.floor(label_noise_fraction * n))
    flipped = np.zeros(n, dtype=bool)
    if n_flip:
        idx = r_label.choice(n, size=n_flip, replace=False)
        shift = r_label.integers(1, num_classes, size=n_flip)
        labels[idx] = (true_labels[idx] + shift) % num_classes
        flipped[idx] = True
    clean = (true_labels < clean_classes) & ~flipped
    data = LabeledEmbeddings(features, labels, np.ones(n), clean)
    return SyntheticDataset(data, true_labels, centers.astype(np.float32), clean_classes)
