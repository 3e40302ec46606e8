"""Training pipelines: interaction-distillation fine-tuning and the
cascade stage with a jointly trained cross encoder.

Each batch runs one shared-encoder forward over every unique query and
passage, builds per-query score sets and distributions from the per-pair
scalar scores, assembles the configured loss bundle, and takes one Adam
step. Given the same config, dataset and seed, every logged value is
bitwise reproducible; with cross-batch gathering off, the simulated shard
count has no effect on any loss.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncodedSequence, EncoderModel, TokenSequence, extract_cross_attention
from .errors import ConfigError, ContractError, NumericError
from .evaluation import EvalData, evaluate_model
from .formats import Record
from .interaction import (
    ScoreDistribution,
    ScoreSet,
    late_attention_maps,
    late_score,
    metric_score,
    to_distribution,
)
from .losses import (
    DistillBatch,
    LossBundle,
    LossFlags,
    QueryEntry,
    cascade_loss,
    interaction_distill_loss,
)
from .optim import Adam
from .retrieval import build_index, retrieve_topk
from .rng import RngState
from .tensor import Tensor, backward, no_grad, stack_scalars

logger = logging.getLogger(__name__)


@dataclass
class TrainingExample:
    query_id: int
    query: TokenSequence
    positive_id: int
    positive: TokenSequence
    negative_ids: list[int]
    negatives: list[TokenSequence]

    def __post_init__(self):
        if self.positive_id in self.negative_ids:
            raise ContractError(
                f"query {self.query_id}: positive passage {self.positive_id} appears as a negative"
            )
        if len(self.negative_ids) != len(self.negatives):
            raise ContractError("negative ids and sequences must align")


@dataclass
class TrainConfig:
    step: str = "id"  # id | cascade
    batch_queries: int = 8
    n_negatives: int = 7
    epochs: int = 2
    learning_rate: float = 2e-3
    n_shards: int = 1
    cross_batch: bool = False
    id_prime: bool = False  # distillation over the full gathered pool
    flags: LossFlags = field(default_factory=LossFlags)
    weights: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    temperature: float = 1.0
    normalize_late_tokens: bool = False
    eval_every: int = 0  # steps between snapshots; 0 = once per epoch

    def __post_init__(self):
        if self.step not in ("id", "cascade"):
            raise ConfigError(f"unknown training step {self.step!r}")
        if self.n_negatives < 1:
            raise ConfigError("n_negatives must be >= 1")
        if self.n_shards < 1:
            raise ConfigError("n_shards must be >= 1")
        if self.batch_queries < 1:
            raise ConfigError("batch_queries must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    n_duplicates_removed: int = 0

    def to_rows(self) -> list[dict]:
        rows = [
            {
                "type": "meta",
                "wall_clock": self.wall_clock,
                "n_duplicates_removed": self.n_duplicates_removed,
            }
        ]
        rows += [{"type": "record", **r} for r in self.records]
        rows += [{"type": "eval", **e} for e in self.evals]
        return rows

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "TrainLog":
        log = cls()
        for row in rows:
            kind = row.get("type")
            payload = {k: v for k, v in row.items() if k != "type"}
            if kind == "meta":
                log.wall_clock = payload.get("wall_clock", 0.0)
                log.n_duplicates_removed = payload.get("n_duplicates_removed", 0)
            elif kind == "record":
                log.records.append(payload)
            elif kind == "eval":
                log.evals.append(payload)
            else:
                raise ContractError(f"unknown train-log row type {kind!r}")
        return log


# ---------------------------------------------------------------------------
# Candidate lists


@dataclass
class CandidateList:
    supervised_ids: list[int]
    positive_index: int
    distill_ids: list[int]
    n_duplicates_removed: int


def _dedup(ids: list[int]) -> tuple[list[int], int]:
    seen: set[int] = set()
    out: list[int] = []
    removed = 0
    for pid in ids:
        if pid in seen:
            removed += 1
        else:
            seen.add(pid)
            out.append(pid)
    return out, removed


def build_candidate_list(
    batch: list[TrainingExample],
    index: int,
    *,
    n_shards: int = 1,
    cross_batch: bool = False,
    gather_distill: bool = False,
) -> CandidateList:
    """Candidate pool for one query of a batch.

    The query's own positive always sits at index 0, followed by its
    explicit negatives. With ``cross_batch`` set, the other queries'
    positives and negatives from every simulated shard join the supervised
    list; the distillation list covers the local shard's pool only unless
    ``gather_distill`` widens it to the full gathered list. Duplicate
    passage ids are dropped (first occurrence wins) and counted.
    """
    if not batch:
        raise ContractError("batch must be nonempty")
    if not 0 <= index < len(batch):
        raise ContractError(f"index {index} invalid for batch of {len(batch)}")
    own = [batch[index].positive_id, *batch[index].negative_ids]
    if not cross_batch:
        ids, removed = _dedup(own)
        return CandidateList(ids, 0, list(ids), removed)

    shard_of = lambda i: i * n_shards // len(batch)
    my_shard = shard_of(index)
    gathered_all = list(own)
    gathered_local = list(own)
    for j, example in enumerate(batch):
        if j == index:
            continue
        extra = [example.positive_id, *example.negative_ids]
        gathered_all.extend(extra)
        if shard_of(j) == my_shard:
            gathered_local.extend(extra)
    supervised, removed_all = _dedup(gathered_all)
    if gather_distill:
        distill, removed = supervised, removed_all
    else:
        distill, removed_local = _dedup(gathered_local)
        removed = removed_all + removed_local
    return CandidateList(supervised, 0, list(distill), removed)


# ---------------------------------------------------------------------------
# Batch preparation


def dual_reg_forward(
    model: EncoderModel,
    q_enc: EncodedSequence,
    passages: list[tuple[int, TokenSequence]],
    rng: RngState,
    *,
    query_id: int = 0,
    temperature: float = 1.0,
    include_late: bool = True,
    normalize: bool = False,
    passage_encoder=None,
) -> tuple[ScoreDistribution, ScoreDistribution, ScoreDistribution | None, ScoreDistribution | None]:
    """Two candidate-list forward passes with distinct dropout seeds.

    Every passage is encoded twice, each pass interacted with the *same*
    query representation; returns the metric-scheme distribution pair and,
    when ``include_late``, the late-scheme pair. Mutating the query
    representation between the passes violates the contract.
    """
    encode = passage_encoder or (lambda seq, pass_rng: model.encode(seq, pass_rng, train_mode=True))
    snapshot = q_enc.cls_rep.data.copy()
    rng_first, rng_second = rng.split(), rng.split()
    ids = [pid for pid, _ in passages]

    def distributions(pass_rng):
        encs = [encode(seq, pass_rng) for _, seq in passages]
        de = stack_scalars([metric_score(q_enc, e) for e in encs])
        de_dist = to_distribution(ScoreSet(query_id, ids, de, "de"), temperature)
        li_dist = None
        if include_late:
            li = stack_scalars([late_score(q_enc, e, normalize=normalize) for e in encs])
            li_dist = to_distribution(ScoreSet(query_id, ids, li, "li"), temperature)
        return de_dist, li_dist

    de_first, li_first = distributions(rng_first)
    de_second, li_second = distributions(rng_second)
    if not np.array_equal(snapshot, q_enc.cls_rep.data):
        raise ContractError("query representation changed between the two passes")
    return de_first, de_second, li_first, li_second


def _score_dicts(
    q_enc: EncodedSequence,
    passage_encs: dict[int, EncodedSequence],
    ids: list[int],
    normalize: bool,
) -> tuple[dict[int, Tensor], dict[int, Tensor]]:
    de = {pid: metric_score(q_enc, passage_encs[pid]) for pid in ids}
    li = {pid: late_score(q_enc, passage_encs[pid], normalize=normalize) for pid in ids}
    return de, li


def _score_set(query_id, ids, scalars, scheme) -> ScoreSet:
    return ScoreSet(query_id, list(ids), stack_scalars([scalars[pid] for pid in ids]), scheme)


def _sequences_by_id(batch: list[TrainingExample]) -> dict[int, TokenSequence]:
    sequences: dict[int, TokenSequence] = {}
    for example in batch:
        sequences.setdefault(example.positive_id, example.positive)
        for pid, seq in zip(example.negative_ids, example.negatives):
            sequences.setdefault(pid, seq)
    return sequences


def _encode_unique(
    model: EncoderModel, sequences: dict[int, TokenSequence], ids: list[int], rng: RngState
) -> dict[int, EncodedSequence]:
    return {pid: model.encode(sequences[pid], rng, train_mode=True) for pid in sorted(ids)}


def _prepare_batch(
    model: EncoderModel,
    batch: list[TrainingExample],
    config: TrainConfig,
    rng: RngState,
    cross_model: EncoderModel | None = None,
) -> tuple[DistillBatch, int]:
    """Shared forward passes plus per-query score assembly for one batch."""
    clists = [
        build_candidate_list(
            batch,
            i,
            n_shards=config.n_shards,
            cross_batch=config.cross_batch,
            gather_distill=config.id_prime,
        )
        for i in range(len(batch))
    ]
    duplicates = sum(c.n_duplicates_removed for c in clists)
    needed_ids = sorted({pid for c in clists for pid in c.supervised_ids})
    sequences = _sequences_by_id(batch)

    rng_queries = rng.split()
    rng_passages = rng.split()
    rng_alt = rng.split() if config.flags.dual_reg else None
    rng_cross = rng.split() if cross_model is not None else None

    q_encs = [model.encode(ex.query, rng_queries, train_mode=True) for ex in batch]
    p_encs = _encode_unique(model, sequences, needed_ids, rng_passages)
    p_encs_alt = (
        _encode_unique(model, sequences, needed_ids, rng_alt) if rng_alt is not None else None
    )

    entries: list[QueryEntry] = []
    for i, (example, clist) in enumerate(zip(batch, clists)):
        q_enc = q_encs[i]
        de, li = _score_dicts(q_enc, p_encs, clist.supervised_ids, config.normalize_late_tokens)
        entry = QueryEntry(
            query_id=example.query_id,
            positive_index=clist.positive_index,
            de_scores=_score_set(example.query_id, clist.supervised_ids, de, "de"),
            li_scores=_score_set(example.query_id, clist.supervised_ids, li, "li"),
            de_dist=to_distribution(
                _score_set(example.query_id, clist.distill_ids, de, "de"), config.temperature
            ),
            li_dist=to_distribution(
                _score_set(example.query_id, clist.distill_ids, li, "li"), config.temperature
            ),
        )
        if p_encs_alt is not None:
            de_alt, li_alt = _score_dicts(
                q_enc, p_encs_alt, clist.distill_ids, config.normalize_late_tokens
            )
            entry.de_dist_alt = to_distribution(
                _score_set(example.query_id, clist.distill_ids, de_alt, "de"), config.temperature
            )
            entry.li_dist_alt = to_distribution(
                _score_set(example.query_id, clist.distill_ids, li_alt, "li"), config.temperature
            )
        if cross_model is not None:
            cross_outputs = {
                pid: cross_model.cross_encode(example.query, sequences[pid], rng_cross, True)
                for pid in clist.supervised_ids
            }
            ce = {pid: out.score for pid, out in cross_outputs.items()}
            entry.ce_scores = _score_set(example.query_id, clist.supervised_ids, ce, "ce")
            entry.ce_dist = to_distribution(
                _score_set(example.query_id, clist.distill_ids, ce, "ce"), config.temperature
            )
            if config.flags.l_attn:
                pairs = []
                for pid in clist.distill_ids:
                    out = cross_outputs[pid]
                    ce_maps = extract_cross_attention(
                        out.attn_maps, out.query_len, out.passage_len
                    )
                    li_maps = late_attention_maps(
                        q_enc,
                        p_encs[pid],
                        cross_model.config.n_heads,
                        normalize=config.normalize_late_tokens,
                    )
                    pairs.append((ce_maps, li_maps))
                entry.attn_pairs = pairs
        entries.append(entry)
    return DistillBatch(entries), duplicates


# ---------------------------------------------------------------------------
# Training loops


def _check_finite(bundle: LossBundle) -> None:
    for name, term in bundle.terms.items():
        value = float(term.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss term {name}: {value}")


def _fill_missing_grads(optimizer: Adam) -> None:
    # Parameter sets untouched by the enabled terms take a zero step.
    for p in optimizer.params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _batches(order: list[int], size: int) -> list[list[int]]:
    return [order[start : start + size] for start in range(0, len(order), size)]


def _snapshot(model: EncoderModel, dev: EvalData, step: int, evals: list[dict]) -> None:
    results = evaluate_model(model, dev, scheme="de")
    evals.append({"step": step, "split": "dev", **results})


def _run_training(
    config: TrainConfig,
    train_set: list[TrainingExample],
    model: EncoderModel,
    cross_model: EncoderModel | None,
    dev: EvalData | None,
    loss_fn,
    stream_label: str,
) -> TrainLog:
    if not train_set:
        raise ContractError("training set is empty")
    master = RngState(config.seed).child(stream_label)
    steps_rng = master.child("steps")
    params = list(model.parameters())
    if cross_model is not None:
        params += cross_model.parameters()
    optimizer = Adam(params, lr=config.learning_rate)
    log = TrainLog()
    start = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        order = master.child(("order", epoch)).permutation(len(train_set))
        for batch_indices in _batches(order, config.batch_queries):
            batch = [train_set[i] for i in batch_indices]
            step_rng = steps_rng.split()
            distill_batch, duplicates = _prepare_batch(
                model, batch, config, step_rng, cross_model
            )
            log.n_duplicates_removed += duplicates
            bundle = loss_fn(distill_batch, config.flags, config.weights or None)
            _check_finite(bundle)
            backward(bundle.total)
            _fill_missing_grads(optimizer)
            optimizer.step()
            step += 1
            log.records.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "terms": bundle.values(),
                    "total": float(bundle.total.data),
                }
            )
            if dev is not None and config.eval_every > 0 and step % config.eval_every == 0:
                _snapshot(model, dev, step, log.evals)
        if dev is not None and config.eval_every == 0:
            _snapshot(model, dev, step, log.evals)
    if log.n_duplicates_removed:
        logger.warning("removed %d duplicate candidate ids", log.n_duplicates_removed)
    log.wall_clock = time.perf_counter() - start
    return log


def train_interaction_distillation(
    config: TrainConfig,
    train_set: list[TrainingExample],
    model: EncoderModel,
    dev: EvalData | None = None,
) -> TrainLog:
    """Joint supervised + late-to-metric distillation training of the shared
    encoder. The model is updated in place; the returned log holds the
    per-step term trace and any dev snapshots."""
    if config.step != "id":
        raise ConfigError(f"config.step must be 'id', got {config.step!r}")
    return _run_training(
        config, train_set, model, None, dev, interaction_distill_loss, "train-id"
    )


def train_cascade(
    config: TrainConfig,
    train_set: list[TrainingExample],
    model: EncoderModel,
    cross_model: EncoderModel,
    dev: EvalData | None = None,
) -> TrainLog:
    """Joint training of the shared student encoder and the cross encoder
    under the full distillation chain. Both models update in place."""
    if config.step != "cascade":
        raise ConfigError(f"config.step must be 'cascade', got {config.step!r}")
    if not cross_model.scoring_head:
        raise ContractError("cascade training needs a cross encoder with a scoring head")
    if config.flags.l_attn and cross_model.config.n_heads != model.config.n_heads:
        raise ConfigError(
            "attention distillation needs matching head counts: "
            f"{cross_model.config.n_heads} vs {model.config.n_heads}"
        )
    return _run_training(
        config, train_set, model, cross_model, dev, cascade_loss, "train-cascade"
    )


# ---------------------------------------------------------------------------
# Dataset construction


def build_training_set(
    corpus: list[Record],
    queries: list[Record],
    qrels: dict[int, int],
    n_negatives: int,
    rng: RngState,
) -> list[TrainingExample]:
    """Attach ``n_negatives`` uniform random non-positive passages per query."""
    corpus_map = {pid: tokens for pid, tokens in corpus}
    ordered_ids = [pid for pid, _ in corpus]
    examples = []
    for qid, tokens in queries:
        if qid not in qrels:
            raise ContractError(f"query {qid} has no relevance label")
        positive_id = qrels[qid]
        pool = [pid for pid in ordered_ids if pid != positive_id]
        if len(pool) < n_negatives:
            raise ContractError(
                f"corpus too small to draw {n_negatives} negatives for query {qid}"
            )
        chosen = [pool[i] for i in rng.sample(len(pool), n_negatives)]
        examples.append(
            TrainingExample(
                query_id=qid,
                query=TokenSequence.for_query(tokens),
                positive_id=positive_id,
                positive=TokenSequence.for_passage(corpus_map[positive_id]),
                negative_ids=chosen,
                negatives=[TokenSequence.for_passage(corpus_map[pid]) for pid in chosen],
            )
        )
    return examples


def mine_negatives(
    model: EncoderModel,
    corpus: list[Record],
    queries: list[Record],
    qrels: dict[int, int],
    top_m: int,
    n_negatives: int,
    rng: RngState,
    normalize: bool = False,
) -> list[TrainingExample]:
    """Hard-negative mining: retrieve the metric-scheme top ``top_m`` per
    query, drop the positive, and sample ``n_negatives`` without
    replacement. Falls back to the whole corpus (minus the positive) with a
    warning when the retrieved pool is too small."""
    corpus_map = {pid: tokens for pid, tokens in corpus}
    index = build_index(model, corpus, store_tokens=False)
    examples = []
    fallbacks = 0
    with no_grad():
        for qid, tokens in queries:
            if qid not in qrels:
                raise ContractError(f"query {qid} has no relevance label")
            positive_id = qrels[qid]
            q_enc = model.encode(TokenSequence.for_query(tokens))
            ranked = retrieve_topk(index, q_enc, top_m, "de", query_id=qid)
            pool = [pid for pid in ranked.passage_ids if pid != positive_id]
            if len(pool) < n_negatives:
                fallbacks += 1
                pool = [pid for pid, _ in corpus if pid != positive_id]
                if len(pool) < n_negatives:
                    raise ContractError(
                        f"corpus too small to draw {n_negatives} negatives for query {qid}"
                    )
            chosen = [pool[i] for i in rng.sample(len(pool), n_negatives)]
            examples.append(
                TrainingExample(
                    query_id=qid,
                    query=TokenSequence.for_query(tokens),
                    positive_id=positive_id,
                    positive=TokenSequence.for_passage(corpus_map[positive_id]),
                    negative_ids=chosen,
                    negatives=[TokenSequence.for_passage(corpus_map[pid]) for pid in chosen],
                )
            )
    if fallbacks:
        logger.warning(
            "negative mining fell back to whole-corpus sampling for %d queries", fallbacks
        )
    return examples


def examples_to_rows(examples: list[TrainingExample]) -> list[dict]:
    return [
        {
            "query_id": ex.query_id,
            "positive_id": ex.positive_id,
            "negative_ids": list(ex.negative_ids),
        }
        for ex in examples
    ]


def examples_from_rows(
    rows: list[dict], corpus: list[Record], queries: list[Record]
) -> list[TrainingExample]:
    corpus_map = {pid: tokens for pid, tokens in corpus}
    query_map = {qid: tokens for qid, tokens in queries}
    examples = []
    for row in rows:
        qid = int(row["query_id"])
        if qid not in query_map:
            raise ContractError(f"mined example references unknown query {qid}")
        for pid in [row["positive_id"], *row["negative_ids"]]:
            if pid not in corpus_map:
                raise ContractError(f"mined example references unknown passage {pid}")
        examples.append(
            TrainingExample(
                query_id=qid,
                query=TokenSequence.for_query(query_map[qid]),
                positive_id=int(row["positive_id"]),
                positive=TokenSequence.for_passage(corpus_map[int(row["positive_id"])]),
                negative_ids=[int(p) for p in row["negative_ids"]],
                negatives=[TokenSequence.for_passage(corpus_map[int(p)]) for p in row["negative_ids"]],
            )
        )
    return examples
