"""Retrieval scoring: per-query average precision and mAP@100.

AP@k for one query with relevant set R and ranked predictions p::

    AP@k = 1 / min(|R|, k) * sum_{j <= min(len(p), k)} P(j) * rel(j)

Queries whose relevant set is empty are left out of the mean; a known query
with no prediction row scores 0.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

__all__ = [
    "average_precision_at_k",
    "mean_ap_at_k",
    "mean_ap_at_100",
    "precision_at_k",
    "validate_truth",
]

MAP_K = 100


def _check_unique(predicted: Sequence[str]) -> None:
    if len(set(predicted)) != len(predicted):
        seen = set()
        for p in predicted:
            if p in seen:
                raise ValueError(f"duplicate prediction {p!r}")
            seen.add(p)


def average_precision_at_k(predicted: Sequence[str], relevant: Iterable[str], k: int) -> float:
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    _check_unique(predicted)
    hits = 0
    total = 0.0
    for j, p in enumerate(predicted[:k], start=1):
        if p in relevant:
            hits += 1
            total += hits / j
    return total / min(len(relevant), k)


def precision_at_k(predicted: Sequence[str], relevant: Iterable[str], k: int) -> float:
    relevant = set(relevant)
    return sum(p in relevant for p in predicted[:k]) / k


def validate_truth(truth: Mapping[str, Iterable[str]]) -> dict[str, frozenset[str]]:
    out = {}
    for q, rel in truth.items():
        if not isinstance(q, str) or not q:
            raise ValueError(f"query id must be a non-empty string, got {q!r}")
        out[q] = frozenset(rel)
    return out


def mean_ap_at_k(
    predictions: Mapping[str, Sequence[str]],
    truth: Mapping[str, Iterable[str]],
    k: int = MAP_K,
) -> float:
    truth = validate_truth(truth)
    for q in predictions:
        if q not in truth:
            raise KeyError(f"prediction for unknown query {q!r}")
    scored = [q for q, rel in truth.items() if rel]
    if not scored:
        raise ValueError("no query has a non-empty relevant set")
    total = 0.0
    for q in scored:
        total += average_precision_at_k(predictions.get(q, ()), truth[q], k)
    return total / len(scored)


def mean_ap_at_100(
    predictions: Mapping[str, Sequence[str]], truth: Mapping[str, Iterable[str]]
) -> float:
    return mean_ap_at_k(predictions, truth, MAP_K)
