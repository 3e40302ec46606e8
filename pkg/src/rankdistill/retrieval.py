"""Exact brute-force retrieval over encoded passages.

The index stores the [CLS] matrix (dot-product scheme) and optionally the
per-passage content-token representations (MaxSim scheme). Search scores
every passage, so rankings are exact; ties break by ascending passage id.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .encoder import EncodedSequence, EncoderModel, TokenSequence
from .errors import ContractError, VocabularyError
from .tensor import no_grad

INDEX_FORMAT_VERSION = 1
SCORE_THREADS_ENV = "RANKDISTILL_SCORE_THREADS"


def corpus_hash(corpus: list[tuple[int, list[int]]]) -> str:
    """Canonical hash of (id, tokens) records, independent of file layout."""
    h = hashlib.sha256()
    for pid, tokens in corpus:
        h.update(f"{pid}:{','.join(str(t) for t in tokens)}\n".encode())
    return h.hexdigest()


@dataclass
class PassageIndex:
    passage_ids: np.ndarray  # (M,) int64
    cls_matrix: np.ndarray  # (M, d)
    token_reps: list[np.ndarray] | None  # per passage, (content_len, d)
    fingerprint: str  # encoder state used to build
    corpus_digest: str

    def __post_init__(self):
        if self.cls_matrix.shape[0] != self.passage_ids.shape[0]:
            raise ContractError("cls matrix rows must match passage ids")

    @property
    def size(self) -> int:
        return int(self.passage_ids.shape[0])


@dataclass
class RankedList:
    query_id: int
    passage_ids: list[int]
    scores: list[float]
    cutoff: int
    truncated: bool = False  # cutoff exceeded the corpus size

    def __post_init__(self):
        for earlier, later in zip(self.scores, self.scores[1:]):
            if later > earlier:
                raise ContractError("ranked scores must be non-increasing")


def build_index(
    model: EncoderModel, corpus: list[tuple[int, list[int]]], store_tokens: bool = False
) -> PassageIndex:
    """Encode every passage in eval mode (dropout off); deterministic."""
    if not corpus:
        raise ContractError("corpus must be nonempty")
    cls_rows = []
    token_store: list[np.ndarray] | None = [] if store_tokens else None
    with no_grad():
        for pid, tokens in corpus:
            try:
                enc = model.encode(TokenSequence.for_passage(tokens))
            except VocabularyError as exc:
                raise VocabularyError(f"passage {pid}: {exc}") from exc
            cls_rows.append(enc.cls_rep.data)
            if token_store is not None:
                token_store.append(enc.content_reps().data)
    return PassageIndex(
        passage_ids=np.asarray([pid for pid, _ in corpus], dtype=np.int64),
        cls_matrix=np.stack(cls_rows),
        token_reps=token_store,
        fingerprint=model.fingerprint(),
        corpus_digest=corpus_hash(corpus),
    )


def _maxsim(query_tokens: np.ndarray, passage_tokens: np.ndarray, normalize: bool) -> float:
    q, p = query_tokens, passage_tokens
    if normalize:
        q = q / np.sqrt((q * q).sum(axis=1, keepdims=True) + 1e-12)
        p = p / np.sqrt((p * p).sum(axis=1, keepdims=True) + 1e-12)
    return float((q @ p.T).max(axis=1).sum())


def _score_threads() -> int:
    value = os.environ.get(SCORE_THREADS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def score_all(
    index: PassageIndex,
    query_enc: EncodedSequence,
    scheme: str,
    normalize: bool = False,
) -> np.ndarray:
    """Score the query against every indexed passage, in index order."""
    if scheme == "de":
        return index.cls_matrix @ query_enc.cls_rep.data
    if scheme == "li":
        if index.token_reps is None:
            raise ContractError("late-interaction retrieval needs an index built with store_tokens")
        q_tokens = query_enc.content_reps().data
        threads = _score_threads()
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                scores = list(pool.map(lambda p: _maxsim(q_tokens, p, normalize), index.token_reps))
        else:
            scores = [_maxsim(q_tokens, p, normalize) for p in index.token_reps]
        return np.asarray(scores)
    raise ContractError(f"unknown retrieval scheme {scheme!r}")


def retrieve_topk(
    index: PassageIndex,
    query_enc: EncodedSequence,
    k: int,
    scheme: str,
    query_id: int = 0,
    normalize: bool = False,
) -> RankedList:
    """Exact top-k by the chosen scheme; ties break by ascending passage id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    scores = score_all(index, query_enc, scheme, normalize)
    order = np.lexsort((index.passage_ids, -scores))
    truncated = k > index.size
    top = order[: min(k, index.size)]
    return RankedList(
        query_id=query_id,
        passage_ids=[int(index.passage_ids[i]) for i in top],
        scores=[float(scores[i]) for i in top],
        cutoff=k,
        truncated=truncated,
    )


def retrieve(
    index: PassageIndex,
    model: EncoderModel,
    query_tokens: list[int],
    k: int,
    scheme: str,
    query_id: int = 0,
    normalize: bool = False,
) -> RankedList:
    """Encode a raw query and search; refuses a model that does not match
    the index fingerprint."""
    if model.fingerprint() != index.fingerprint:
        raise ContractError("encoder state does not match the index fingerprint")
    with no_grad():
        q_enc = model.encode(TokenSequence.for_query(query_tokens))
    return retrieve_topk(index, q_enc, k, scheme, query_id=query_id, normalize=normalize)


def save_index(index: PassageIndex, path) -> None:
    meta = {
        "format_version": INDEX_FORMAT_VERSION,
        "fingerprint": index.fingerprint,
        "corpus_digest": index.corpus_digest,
        "has_tokens": index.token_reps is not None,
    }
    arrays = {
        "passage_ids": index.passage_ids,
        "cls_matrix": index.cls_matrix,
    }
    if index.token_reps is not None:
        arrays["token_data"] = (
            np.concatenate(index.token_reps)
            if index.token_reps
            else np.zeros((0, index.cls_matrix.shape[1]))
        )
        arrays["token_offsets"] = np.concatenate(
            [[0], np.cumsum([t.shape[0] for t in index.token_reps])]
        ).astype(np.int64)
    np.savez(path, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_index(path, corpus: list[tuple[int, list[int]]]) -> PassageIndex:
    """Load a persisted index; refuses a corpus whose hash does not match."""
    with np.load(path) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format_version") != INDEX_FORMAT_VERSION:
            raise ContractError(f"unsupported index format version {meta.get('format_version')}")
        digest = corpus_hash(corpus)
        if digest != meta["corpus_digest"]:
            raise ContractError("index was built against a different corpus")
        token_reps = None
        if meta["has_tokens"]:
            data = archive["token_data"]
            offsets = archive["token_offsets"]
            token_reps = [
                data[offsets[i] : offsets[i + 1]] for i in range(len(offsets) - 1)
            ]
        return PassageIndex(
            passage_ids=archive["passage_ids"],
            cls_matrix=archive["cls_matrix"],
            token_reps=token_reps,
            fingerprint=meta["fingerprint"],
            corpus_digest=digest,
        )
