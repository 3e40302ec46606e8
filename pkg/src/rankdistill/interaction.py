"""Relevance scorers over encoded sequences.

Three schemes share the vocabulary of this package:

- ``de``: single-vector dot product of the two [CLS] representations.
- ``li``: token-level MaxSim, the sum over query tokens of the best dot
  product against any passage token.
- ``ce``: scalar head of the joint cross encoder.

Special tokens never participate in the token-level scheme: ``li`` scores
and maps are computed from content tokens only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import CrossOutput, EncodedSequence, EncoderModel, TokenSequence
from .errors import ConfigError, ContractError, NumericError
from .rng import RngState
from .tensor import (
    Tensor,
    add,
    div,
    dot,
    matmul,
    max_along,
    mul,
    narrow,
    scale,
    softmax,
    sqrt,
    stack_scalars,
    sum_along,
    transpose,
)

SCHEMES = ("de", "li", "ce")


@dataclass
class ScoreSet:
    """Raw relevance scores of one query against an ordered candidate list."""

    query_id: int
    candidate_ids: list[int]
    scores: Tensor  # shape (|candidates|,)
    scheme: str

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown scheme {self.scheme!r}")
        if len(self.candidate_ids) != self.scores.data.shape[0] or self.scores.ndim != 1:
            raise ContractError("scores must be a vector matching the candidate list")
        if len(set(self.candidate_ids)) != len(self.candidate_ids):
            raise ContractError("candidate ids must be unique")
        if not np.all(np.isfinite(self.scores.data)):
            raise NumericError("scores contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.candidate_ids)


@dataclass
class ScoreDistribution:
    """Softmax-normalized scores over the same candidate list."""

    query_id: int
    candidate_ids: list[int]
    probs: Tensor

    def __post_init__(self):
        p = self.probs.data
        if p.ndim != 1 or p.shape[0] != len(self.candidate_ids):
            raise ContractError("probs must be a vector matching the candidate list")
        if np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-9:
            raise ContractError("probs must be a probability distribution")

    def detach(self) -> "ScoreDistribution":
        return ScoreDistribution(self.query_id, self.candidate_ids, self.probs.detach())


def _l2_normalize_rows(x: Tensor) -> Tensor:
    norms = sqrt(add(sum_along(mul(x, x), axis=1), 1e-12))
    return div(x, norms.reshape((x.shape[0], 1)))


def metric_score(q_enc: EncodedSequence, p_enc: EncodedSequence) -> Tensor:
    """Dot product of the two [CLS] representations."""
    if q_enc.cls_rep.shape != p_enc.cls_rep.shape:
        raise ContractError(
            f"[CLS] dimensions disagree: {q_enc.cls_rep.shape} vs {p_enc.cls_rep.shape}"
        )
    return dot(q_enc.cls_rep, p_enc.cls_rep)


def late_score(
    q_enc: EncodedSequence, p_enc: EncodedSequence, normalize: bool = False
) -> Tensor:
    """MaxSim: sum over query content tokens of the max dot product against
    passage content tokens. Ties route their gradient to the first maximal
    passage token."""
    if q_enc.n_content < 1 or p_enc.n_content < 1:
        raise ContractError("late interaction needs at least one content token per side")
    q_reps = q_enc.content_reps()
    p_reps = p_enc.content_reps()
    if normalize:
        q_reps = _l2_normalize_rows(q_reps)
        p_reps = _l2_normalize_rows(p_reps)
    sims = matmul(q_reps, transpose(p_reps))
    return sum_along(max_along(sims, axis=1))


def cross_score(
    model: EncoderModel,
    query: TokenSequence,
    passage: TokenSequence,
    rng: RngState | None = None,
    train_mode: bool = False,
) -> CrossOutput:
    return model.cross_encode(query, passage, rng, train_mode)


def score_candidates(
    scheme: str,
    query,
    candidates: list,
    candidate_ids: list[int],
    query_id: int = 0,
    *,
    model: EncoderModel | None = None,
    rng: RngState | None = None,
    train_mode: bool = False,
    normalize: bool = False,
) -> ScoreSet:
    """Score one query against every candidate, preserving list order.

    For ``de``/``li`` the query and candidates are encoded sequences; for
    ``ce`` they are token sequences and ``model`` must carry a scoring head.
    """
    if not candidates:
        raise ContractError("candidate list must be nonempty")
    if len(candidates) != len(candidate_ids):
        raise ContractError("candidate_ids must align with candidates")
    if scheme == "de":
        values = [metric_score(query, c) for c in candidates]
    elif scheme == "li":
        values = [late_score(query, c, normalize=normalize) for c in candidates]
    elif scheme == "ce":
        if model is None:
            raise ContractError("ce scoring needs the cross-encoder model")
        values = [model.cross_encode(query, c, rng, train_mode).score for c in candidates]
    else:
        raise ContractError(f"unknown scheme {scheme!r}")
    return ScoreSet(query_id, list(candidate_ids), stack_scalars(values), scheme)


def to_distribution(score_set: ScoreSet, temperature: float = 1.0) -> ScoreDistribution:
    """Softmax over the candidate axis (temperature 1 unless overridden)."""
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    scores = score_set.scores
    if temperature != 1.0:
        scores = scale(scores, 1.0 / temperature)
    return ScoreDistribution(
        score_set.query_id, list(score_set.candidate_ids), softmax(scores, axis=0)
    )


def late_attention_maps(
    q_enc: EncodedSequence, p_enc: EncodedSequence, n_heads: int, normalize: bool = False
) -> list[Tensor]:
    """Per-head row-softmaxed similarity grids between content tokens.

    The feature axis is split into ``n_heads`` contiguous slices; head i is
    softmax over passage tokens of q_i @ p_i^T, shape (l, k). With
    ``normalize``, the token vectors are L2-normalized first, matching the
    normalized late scores.
    """
    d = q_enc.token_reps.shape[1]
    if d % n_heads != 0:
        raise ConfigError(f"d_model {d} not divisible by n_heads {n_heads}")
    if q_enc.n_content < 1 or p_enc.n_content < 1:
        raise ContractError("attention maps need at least one content token per side")
    d_head = d // n_heads
    q_reps = q_enc.content_reps()
    p_reps = p_enc.content_reps()
    if normalize:
        q_reps = _l2_normalize_rows(q_reps)
        p_reps = _l2_normalize_rows(p_reps)
    maps = []
    for h in range(n_heads):
        qh = narrow(q_reps, 1, h * d_head, d_head)
        ph = narrow(p_reps, 1, h * d_head, d_head)
        maps.append(softmax(matmul(qh, transpose(ph)), axis=1))
    return maps
