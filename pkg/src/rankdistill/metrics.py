"""Ranking metrics: mean reciprocal rank and recall at a cutoff."""

from __future__ import annotations

from .errors import ContractError
from .retrieval import RankedList


def mrr_at_k(ranked: RankedList, positives: set[int], k: int) -> float:
    """Reciprocal rank of the first positive within the top k, else 0."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if not positives:
        raise ContractError(f"query {ranked.query_id} has no positive passages")
    for rank, pid in enumerate(ranked.passage_ids[:k], start=1):
        if pid in positives:
            return 1.0 / rank
    return 0.0


def mean_mrr_at_k(
    ranked_lists: list[RankedList], positives_per_query: dict[int, set[int]], k: int
) -> float:
    """Dataset-level MRR: mean over queries, counting misses as 0."""
    if not ranked_lists:
        raise ContractError("no queries to evaluate")
    total = 0.0
    for ranked in ranked_lists:
        if ranked.query_id not in positives_per_query:
            raise ContractError(f"query {ranked.query_id} missing from the relevance labels")
        total += mrr_at_k(ranked, positives_per_query[ranked.query_id], k)
    return total / len(ranked_lists)


def recall_at_k(
    ranked_lists: list[RankedList], positives_per_query: dict[int, set[int]], k: int
) -> float:
    """Fraction of queries with at least one positive in the top k."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if not ranked_lists:
        raise ContractError("no queries to evaluate")
    hits = 0
    for ranked in ranked_lists:
        positives = positives_per_query.get(ranked.query_id)
        if not positives:
            raise ContractError(f"query {ranked.query_id} has no positive passages")
        if any(pid in positives for pid in ranked.passage_ids[:k]):
            hits += 1
    return hits / len(ranked_lists)
