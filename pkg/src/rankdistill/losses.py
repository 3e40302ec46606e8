"""Loss terms for joint training of the three scoring heads.

Two composite objectives are assembled from the same building blocks:

- the interaction-distillation loss: supervised listwise NLL on the metric
  and late heads plus a KL pulling the metric distribution toward the late
  one, optionally extended with the dual-pass dropout regularizer;
- the cascade loss: supervised NLL on all three heads plus the distillation
  chain cross -> late -> metric, a per-head attention-matching KL, and the
  direct cross -> metric KL.

Per-term booleans reproduce the ablation grid, and every term can be
reweighted (all weights default to 1). Teacher-side distributions are
detached by default so a teacher is driven only by its own supervised
term; a no-detach mode exists for experimentation, and is also what makes
the composite losses finite-difference checkable, since central
differences always see the full dependency.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ContractError
from .interaction import ScoreDistribution, ScoreSet
from .tensor import (
    Tensor,
    add,
    backward,
    exp,
    kl_divergence,
    log,
    max_along,
    narrow,
    reshape,
    scale,
    sub,
    sum_along,
)

TERM_NAMES = (
    "l_de",
    "l_li",
    "l_ce",
    "l_li_to_de",
    "l_ce_to_li",
    "l_ce_to_de",
    "l_attn",
    "l_dualreg",
)


@dataclass(frozen=True)
class LossFlags:
    """Per-term toggles plus teacher-detachment behaviour."""

    l_de: bool = True
    l_li: bool = True
    l_ce: bool = True
    l_li_to_de: bool = True
    l_ce_to_li: bool = True
    l_ce_to_de: bool = True
    l_attn: bool = True
    dual_reg: bool = False
    detach_teachers: bool = True

    @classmethod
    def none(cls, **overrides) -> "LossFlags":
        base = {f.name: False for f in fields(cls)}
        base["detach_teachers"] = True
        base.update(overrides)
        return cls(**base)


def default_weights() -> dict[str, float]:
    return {name: 1.0 for name in TERM_NAMES}


@dataclass
class LossBundle:
    """Named scalar loss terms and their weighted sum."""

    terms: dict[str, Tensor]
    weights: dict[str, float]
    total: Tensor

    @classmethod
    def assemble(cls, terms: dict[str, Tensor], weights: dict[str, float] | None = None):
        if not terms:
            raise ContractError("loss bundle needs at least one term")
        w = default_weights()
        if weights:
            unknown = set(weights) - set(TERM_NAMES)
            if unknown:
                raise ContractError(f"unknown loss weights: {sorted(unknown)}")
            w.update(weights)
        total = None
        for name in TERM_NAMES:
            if name not in terms:
                continue
            contribution = scale(terms[name], w[name])
            total = contribution if total is None else add(total, contribution)
        return cls(terms=terms, weights={n: w[n] for n in terms}, total=total)

    def values(self) -> dict[str, float]:
        return {name: float(t.data) for name, t in self.terms.items()}


@dataclass
class QueryEntry:
    """Everything the losses need for one query of a batch.

    Score sets cover the supervised candidate list; distributions cover the
    (possibly wider) distillation list. The ``*_alt`` distributions come
    from a second passage forward pass with a different dropout seed.
    ``attn_pairs`` holds (cross maps, late maps) per distillation candidate.
    """

    query_id: int
    positive_index: int
    de_scores: ScoreSet | None = None
    li_scores: ScoreSet | None = None
    ce_scores: ScoreSet | None = None
    de_dist: ScoreDistribution | None = None
    li_dist: ScoreDistribution | None = None
    ce_dist: ScoreDistribution | None = None
    de_dist_alt: ScoreDistribution | None = None
    li_dist_alt: ScoreDistribution | None = None
    attn_pairs: list[tuple[list[Tensor], list[Tensor]]] | None = None


@dataclass
class DistillBatch:
    entries: list[QueryEntry]

    def __post_init__(self):
        if not self.entries:
            raise ContractError("batch must contain at least one query")


def contrastive_nll(score_set: ScoreSet, positive_index: int) -> Tensor:
    """Negative log softmax-probability of the positive candidate.

    Computed as logsumexp(scores) - scores[positive]; the max is subtracted
    as a detached constant, which leaves the exact softmax gradient.
    """
    n = len(score_set)
    if not 0 <= positive_index < n:
        raise ContractError(f"positive index {positive_index} invalid for {n} candidates")
    scores = score_set.scores
    m = max_along(scores, axis=0).detach()
    lse = add(log(sum_along(exp(sub(scores, m)))), m)
    positive = reshape(narrow(scores, 0, positive_index, 1), ())
    return sub(lse, positive)


def _check_aligned(a: ScoreDistribution, b: ScoreDistribution) -> None:
    if a.candidate_ids != b.candidate_ids:
        raise ContractError("distributions are over different candidate lists")


def distill_kl(
    teacher: ScoreDistribution, student: ScoreDistribution, detach_teacher: bool = True
) -> Tensor:
    """KL(teacher || student) over one aligned candidate list."""
    _check_aligned(teacher, student)
    p = teacher.probs.detach() if detach_teacher else teacher.probs
    return kl_divergence(p, student.probs)


def attention_distill(
    ce_maps: list[Tensor], li_maps: list[Tensor], detach_teacher: bool = True
) -> Tensor:
    """Mean over heads of KL(cross attention block || late similarity map),
    row-averaged within each head. The cross side is detached by default."""
    if len(ce_maps) != len(li_maps) or not ce_maps:
        raise ContractError(
            f"attention map lists disagree: {len(ce_maps)} vs {len(li_maps)} heads"
        )
    total = None
    for ce_map, li_map in zip(ce_maps, li_maps):
        if ce_map.shape != li_map.shape:
            raise ContractError(
                f"attention map shapes disagree: {ce_map.shape} vs {li_map.shape}"
            )
        teacher = ce_map.detach() if detach_teacher else ce_map
        head_kl = kl_divergence(teacher, li_map)
        total = head_kl if total is None else add(total, head_kl)
    return scale(total, 1.0 / len(ce_maps))


def dual_reg(dist_a: ScoreDistribution, dist_b: ScoreDistribution) -> Tensor:
    """Symmetric KL between two dropout-perturbed score distributions."""
    _check_aligned(dist_a, dist_b)
    forward_kl = kl_divergence(dist_a.probs, dist_b.probs)
    reverse_kl = kl_divergence(dist_b.probs, dist_a.probs)
    return scale(add(forward_kl, reverse_kl), 0.5)


def _require(entry: QueryEntry, attr: str, term: str):
    value = getattr(entry, attr)
    if value is None:
        raise ContractError(f"{term} requested but query {entry.query_id} lacks {attr}")
    return value


def _mean_terms(per_query: dict[str, list[Tensor]]) -> dict[str, Tensor]:
    out = {}
    for name, values in per_query.items():
        total = values[0]
        for v in values[1:]:
            total = add(total, v)
        out[name] = scale(total, 1.0 / len(values))
    return out


def interaction_distill_loss(
    batch: DistillBatch,
    flags: LossFlags,
    weights: dict[str, float] | None = None,
) -> LossBundle:
    """Supervised metric/late NLL plus late-to-metric KL, averaged over the
    batch; with ``dual_reg`` set, adds the two symmetric-KL regularizers
    computed from the alternate-dropout distributions."""
    per_query: dict[str, list[Tensor]] = {}
    for entry in batch.entries:
        if flags.l_de:
            term = contrastive_nll(_require(entry, "de_scores", "l_de"), entry.positive_index)
            per_query.setdefault("l_de", []).append(term)
        if flags.l_li:
            term = contrastive_nll(_require(entry, "li_scores", "l_li"), entry.positive_index)
            per_query.setdefault("l_li", []).append(term)
        if flags.l_li_to_de:
            term = distill_kl(
                _require(entry, "li_dist", "l_li_to_de"),
                _require(entry, "de_dist", "l_li_to_de"),
                detach_teacher=flags.detach_teachers,
            )
            per_query.setdefault("l_li_to_de", []).append(term)
        if flags.dual_reg:
            reg = dual_reg(
                _require(entry, "de_dist", "l_dualreg"),
                _require(entry, "de_dist_alt", "l_dualreg"),
            )
            if entry.li_dist is not None and entry.li_dist_alt is not None:
                reg = add(reg, dual_reg(entry.li_dist, entry.li_dist_alt))
            per_query.setdefault("l_dualreg", []).append(reg)
    if not per_query:
        raise ContractError("no loss terms enabled")
    return LossBundle.assemble(_mean_terms(per_query), weights)


def cascade_loss(
    batch: DistillBatch,
    flags: LossFlags,
    weights: dict[str, float] | None = None,
) -> LossBundle:
    """All three supervised NLLs plus the distillation chain, averaged over
    the batch. The attention term also averages over the per-candidate map
    pairs within a query."""
    per_query: dict[str, list[Tensor]] = {}
    for entry in batch.entries:
        for flag, name, attr in (
            (flags.l_ce, "l_ce", "ce_scores"),
            (flags.l_li, "l_li", "li_scores"),
            (flags.l_de, "l_de", "de_scores"),
        ):
            if flag:
                term = contrastive_nll(_require(entry, attr, name), entry.positive_index)
                per_query.setdefault(name, []).append(term)
        for flag, name, teacher_attr, student_attr in (
            (flags.l_ce_to_li, "l_ce_to_li", "ce_dist", "li_dist"),
            (flags.l_li_to_de, "l_li_to_de", "li_dist", "de_dist"),
            (flags.l_ce_to_de, "l_ce_to_de", "ce_dist", "de_dist"),
        ):
            if flag:
                term = distill_kl(
                    _require(entry, teacher_attr, name),
                    _require(entry, student_attr, name),
                    detach_teacher=flags.detach_teachers,
                )
                per_query.setdefault(name, []).append(term)
        if flags.l_attn:
            pairs = _require(entry, "attn_pairs", "l_attn")
            if not pairs:
                raise ContractError(f"l_attn requested but query {entry.query_id} has no map pairs")
            term = None
            for ce_maps, li_maps in pairs:
                pair_kl = attention_distill(ce_maps, li_maps, detach_teacher=flags.detach_teachers)
                term = pair_kl if term is None else add(term, pair_kl)
            per_query.setdefault("l_attn", []).append(scale(term, 1.0 / len(pairs)))
    if not per_query:
        raise ContractError("no loss terms enabled")
    return LossBundle.assemble(_mean_terms(per_query), weights)
