"""Weighted concatenation of embeddings from several models.

Each member is aligned to the first member's id order, L2-normalized per
row, scaled by its weight, and the blocks are concatenated. The result is
left unnormalized, so squared distances decompose as
``sum_i w_i**2 * d_i**2`` over the member blocks.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .embstore import EmbeddingSet, align_by_ids, l2_normalize

__all__ = ["concat_weighted"]


def concat_weighted(members: Sequence[tuple[EmbeddingSet, float]]) -> EmbeddingSet:
    if not members:
        raise ValueError("ensemble needs at least one member")
    weights = []
    for _, w in members:
        w = float(w)
        if not (math.isfinite(w) and w > 0):
            raise ValueError(f"member weights must be positive and finite, got {w}")
        weights.append(w)
    aligned = align_by_ids([m for m, _ in members])
    blocks = [l2_normalize(m).data * np.float32(w) for m, w in zip(aligned, weights)]
    return EmbeddingSet(aligned[0].ids, np.concatenate(blocks, axis=1), False)
