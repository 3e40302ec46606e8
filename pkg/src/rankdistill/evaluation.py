"""Model evaluation over a corpus and labeled query set."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .encoder import EncoderModel, TokenSequence
from .errors import ContractError
from .formats import Record
from .metrics import mean_mrr_at_k, recall_at_k
from .retrieval import build_index, retrieve_topk
from .tensor import no_grad

logger = logging.getLogger(__name__)


@dataclass
class EvalData:
    corpus: list[Record]
    queries: list[Record]
    qrels: dict[int, int]
    mrr_cutoff: int = 10
    recall_cutoffs: tuple[int, ...] = (5, 20, 50)


def clamp_cutoffs(cutoffs, corpus_size: int) -> list[int]:
    """Cap recall cutoffs at the corpus size, warning when they shrink."""
    clamped = []
    for k in cutoffs:
        if k > corpus_size:
            logger.warning("recall cutoff %d exceeds corpus size %d; clamping", k, corpus_size)
            k = corpus_size
        clamped.append(k)
    return clamped


def evaluate_model(
    model: EncoderModel,
    data: EvalData,
    scheme: str = "de",
    normalize: bool = False,
) -> dict[str, float]:
    """Retrieve for every query and report MRR plus recall at each cutoff."""
    if not data.queries:
        raise ContractError("no queries to evaluate")
    index = build_index(model, data.corpus, store_tokens=(scheme == "li"))
    cutoffs = clamp_cutoffs(data.recall_cutoffs, index.size)
    depth = max([data.mrr_cutoff, *cutoffs])
    ranked_lists = []
    with no_grad():
        for qid, tokens in data.queries:
            q_enc = model.encode(TokenSequence.for_query(tokens))
            ranked_lists.append(
                retrieve_topk(index, q_enc, depth, scheme, query_id=qid, normalize=normalize)
            )
    positives = {qid: {pid} for qid, pid in data.qrels.items()}
    results = {f"mrr@{data.mrr_cutoff}": mean_mrr_at_k(ranked_lists, positives, data.mrr_cutoff)}
    for k in cutoffs:
        results[f"recall@{k}"] = recall_at_k(ranked_lists, positives, k)
    return results
