"""Exact brute-force k-nearest-neighbor search under Euclidean distance.

Squared distances are accumulated in float64, one dimension at a time, so a
pair's distance never depends on how queries are batched or partitioned.
Ties are broken by index id (code-point order, which equals UTF-8 byte
order).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .embstore import EmbeddingSet

__all__ = ["NeighborList", "squared_euclidean", "pairwise_squared", "top_k_search", "DEFAULT_K"]

DEFAULT_K = 100
# queries per distance block; bounds the (block, n_index) float64 buffer
_BLOCK_ELEMS = 1 << 22


@dataclass(frozen=True)
class NeighborList:
    query_id: str
    neighbors: tuple[tuple[str, float], ...]

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.neighbors]

    @property
    def distances(self) -> list[float]:
        return [d for _, d in self.neighbors]


def squared_euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(pairwise_squared(a[None, :], b[None, :])[0, 0])


def pairwise_squared(q: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(nq, nx) float64 squared distances, summed in dimension order."""
    q = np.asarray(q, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if q.shape[1] != x.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {x.shape[1]}")
    acc = np.zeros((q.shape[0], x.shape[0]), dtype=np.float64)
    diff = np.empty_like(acc)
    for j in range(q.shape[1]):
        np.subtract(q[:, j, None], x[None, :, j], out=diff)
        np.multiply(diff, diff, out=diff)
        acc += diff
    return acc


def _select(d2: np.ndarray, k: int, id_rank: np.ndarray) -> np.ndarray:
    """Indices of the k smallest entries of ``d2`` ordered by (distance, id)."""
    n = d2.shape[0]
    if k < n:
        kth = np.partition(d2, k - 1)[k - 1]
        cand = np.flatnonzero(d2 <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((id_rank[cand], d2[cand]))
    return cand[order[:k]]


def top_k_search(
    queries: EmbeddingSet,
    index: EmbeddingSet,
    k: int = DEFAULT_K,
    workers: int = 1,
) -> list[NeighborList]:
    """Exact top-k lookup of every query against ``index``.

    Returns one NeighborList per query in query order, each holding
    ``min(k, len(index))`` (id, euclidean distance) pairs. ``workers`` > 1
    partitions the queries across threads; output is identical either way.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if queries.dim != index.dim:
        raise ValueError(f"dimension mismatch: queries {queries.dim} vs index {index.dim}")
    if len(index) == 0:
        raise ValueError("index is empty")

    kk = min(k, len(index))
    id_rank = np.empty(len(index), dtype=np.int64)
    id_rank[sorted(range(len(index)), key=index.ids.__getitem__)] = np.arange(len(index))
    x = index.data.astype(np.float64)
    q = queries.data.astype(np.float64)
    block = max(1, _BLOCK_ELEMS // len(index))

    def run(lo: int, hi: int) -> list[NeighborList]:
        d2 = pairwise_squared(q[lo:hi], x)
        out = []
        for r in range(hi - lo):
            sel = _select(d2[r], kk, id_rank)
            out.append(
                NeighborList(
                    queries.ids[lo + r],
                    tuple((index.ids[c], math.sqrt(d2[r, c])) for c in sel),
                )
            )
        return out

    spans = [(lo, min(lo + block, len(queries))) for lo in range(0, len(queries), block)]
    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda s: run(*s), spans))
    else:
        parts = [run(*s) for s in spans]
    return [nl for part in parts for nl in part]
