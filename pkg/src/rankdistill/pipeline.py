"""Pipeline stages behind the command-line interface.

Stages communicate only through files under the run directory (or the
explicit paths in the config's data section): generated task data,
encoder checkpoints, mined training examples, train logs, rankings and
metrics. Re-running any stage with the same config and seed reproduces
its outputs byte for byte.
"""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

from . import formats
from .config import RunConfig
from .datagen import generate_task
from .encoder import EncoderModel, TokenSequence
from .errors import ConfigError, ContractError
from .evaluation import EvalData, evaluate_model
from .retrieval import build_index, retrieve_topk
from .rng import RngState
from .tensor import no_grad
from .trainer import (
    TrainLog,
    build_training_set,
    examples_from_rows,
    examples_to_rows,
    mine_negatives,
    train_cascade,
    train_interaction_distillation,
)

logger = logging.getLogger(__name__)


class RunPaths:
    """Canonical layout of a run directory."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.data_dir = self.out / "data"
        self.checkpoint_dir = self.out / "checkpoints"
        self.log_dir = self.out / "logs"
        self.metrics_dir = self.out / "metrics"
        self.corpus = self.data_dir / "corpus.jsonl"
        self.mined = self.data_dir / "mined.jsonl"
        self.encoder_id = self.checkpoint_dir / "encoder_id.npz"
        self.encoder_cascade = self.checkpoint_dir / "encoder_cascade.npz"
        self.cross_cascade = self.checkpoint_dir / "cross_cascade.npz"
        self.trainlog_id = self.log_dir / "train_id.jsonl"
        self.trainlog_cascade = self.log_dir / "train_cascade.jsonl"
        self.eval_metrics = self.metrics_dir / "eval.json"
        self.ranking = self.metrics_dir / "ranking.tsv"

    def queries(self, split: str) -> Path:
        return self.data_dir / f"queries_{split}.jsonl"

    def qrels(self, split: str) -> Path:
        return self.data_dir / f"qrels_{split}.tsv"


def _resolve(explicit: str | None, default: Path, what: str) -> Path:
    path = Path(explicit) if explicit else default
    if not path.exists():
        raise ContractError(f"{what} not found at {path}")
    return path


def _load_split(cfg: RunConfig, paths: RunPaths, split: str):
    corpus = formats.read_records(_resolve(cfg.data.corpus, paths.corpus, "corpus"))
    queries = formats.read_records(
        _resolve(getattr(cfg.data, f"queries_{split}"), paths.queries(split), f"{split} queries")
    )
    qrels = formats.read_qrels(
        _resolve(getattr(cfg.data, f"qrels_{split}"), paths.qrels(split), f"{split} qrels")
    )
    formats.validate_qrels(qrels, queries, corpus)
    return corpus, queries, qrels


def _eval_data(cfg: RunConfig, paths: RunPaths, split: str) -> EvalData:
    corpus, queries, qrels = _load_split(cfg, paths, split)
    return EvalData(
        corpus=corpus,
        queries=queries,
        qrels=qrels,
        mrr_cutoff=cfg.eval.mrr_cutoff,
        recall_cutoffs=cfg.eval.recall_cutoffs,
    )


def _student_checkpoint(cfg: RunConfig, paths: RunPaths) -> Path:
    """Explicit checkpoint if configured, else the newest pipeline stage."""
    if cfg.data.checkpoint:
        return _resolve(cfg.data.checkpoint, paths.encoder_id, "checkpoint")
    if paths.encoder_cascade.exists():
        return paths.encoder_cascade
    return _resolve(None, paths.encoder_id, "checkpoint")


def stage_generate_data(cfg: RunConfig) -> Path:
    if cfg.task is None:
        raise ConfigError("generate-data needs a task section in the config")
    paths = RunPaths(cfg.out_dir)
    task_files = generate_task(cfg.task, paths.data_dir)
    logger.info("wrote task files under %s", paths.data_dir)
    return task_files.corpus


def stage_train_id(cfg: RunConfig) -> Path:
    paths = RunPaths(cfg.out_dir)
    corpus, queries, qrels = _load_split(cfg, paths, "train")
    dev = _eval_data(cfg, paths, "dev")
    train_cfg = dataclasses.replace(cfg.train, step="id", seed=cfg.seed)
    train_set = build_training_set(
        corpus, queries, qrels, train_cfg.n_negatives, RngState(cfg.seed).child("negatives")
    )
    model = EncoderModel.initialize(cfg.encoder, RngState(cfg.seed).child("init"), init_scale=0.1)
    log = train_interaction_distillation(train_cfg, train_set, model, dev)
    paths.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    paths.log_dir.mkdir(parents=True, exist_ok=True)
    model.save(paths.encoder_id)
    formats.write_jsonl(log.to_rows(), paths.trainlog_id)
    logger.info("saved %s", paths.encoder_id)
    return paths.encoder_id


def stage_mine_negatives(cfg: RunConfig) -> Path:
    paths = RunPaths(cfg.out_dir)
    corpus, queries, qrels = _load_split(cfg, paths, "train")
    model = EncoderModel.load(_student_checkpoint(cfg, paths))
    examples = mine_negatives(
        model,
        corpus,
        queries,
        qrels,
        cfg.mine.top_m,
        cfg.mine.n_negatives,
        RngState(cfg.seed).child("mining"),
        normalize=cfg.train.normalize_late_tokens,
    )
    paths.data_dir.mkdir(parents=True, exist_ok=True)
    formats.write_jsonl(examples_to_rows(examples), paths.mined)
    logger.info("mined %d examples into %s", len(examples), paths.mined)
    return paths.mined


def stage_train_cascade(cfg: RunConfig) -> Path:
    paths = RunPaths(cfg.out_dir)
    corpus, queries, _ = _load_split(cfg, paths, "train")
    dev = _eval_data(cfg, paths, "dev")
    rows = formats.read_jsonl(_resolve(cfg.data.mined, paths.mined, "mined training set"))
    train_set = examples_from_rows(rows, corpus, queries)
    student_path = (
        Path(cfg.data.checkpoint)
        if cfg.data.checkpoint
        else _resolve(None, paths.encoder_id, "student checkpoint")
    )
    model = EncoderModel.load(student_path)
    if cfg.data.cross_checkpoint:
        cross_model = EncoderModel.load(
            _resolve(cfg.data.cross_checkpoint, paths.cross_cascade, "cross checkpoint")
        )
    else:
        cross_cfg = cfg.cross or cfg.encoder
        cross_model = EncoderModel.initialize(
            cross_cfg, RngState(cfg.seed).child("cross-init"), scoring_head=True, init_scale=0.1
        )
    train_cfg = dataclasses.replace(cfg.train, step="cascade", seed=cfg.seed)
    log = train_cascade(train_cfg, train_set, model, cross_model, dev)
    paths.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    paths.log_dir.mkdir(parents=True, exist_ok=True)
    model.save(paths.encoder_cascade)
    cross_model.save(paths.cross_cascade)
    formats.write_jsonl(log.to_rows(), paths.trainlog_cascade)
    logger.info("saved %s and %s", paths.encoder_cascade, paths.cross_cascade)
    return paths.encoder_cascade


def stage_eval(cfg: RunConfig) -> Path:
    paths = RunPaths(cfg.out_dir)
    data = _eval_data(cfg, paths, cfg.eval.split)
    model = EncoderModel.load(_student_checkpoint(cfg, paths))
    results = evaluate_model(
        model, data, scheme=cfg.eval.scheme, normalize=cfg.train.normalize_late_tokens
    )
    paths.metrics_dir.mkdir(parents=True, exist_ok=True)
    formats.write_metrics(
        {"split": cfg.eval.split, "scheme": cfg.eval.scheme, "metrics": results},
        paths.eval_metrics,
    )
    logger.info("metrics: %s", results)
    return paths.eval_metrics


def stage_retrieve(cfg: RunConfig) -> Path:
    paths = RunPaths(cfg.out_dir)
    corpus, queries, _ = _load_split(cfg, paths, cfg.eval.split)
    model = EncoderModel.load(_student_checkpoint(cfg, paths))
    index = build_index(model, corpus, store_tokens=(cfg.eval.scheme == "li"))
    depth = max([cfg.eval.mrr_cutoff, *cfg.eval.recall_cutoffs])
    paths.metrics_dir.mkdir(parents=True, exist_ok=True)
    with open(paths.ranking, "w", encoding="utf-8") as fh, no_grad():
        for qid, tokens in queries:
            q_enc = model.encode(TokenSequence.for_query(tokens))
            ranked = retrieve_topk(
                index,
                q_enc,
                depth,
                cfg.eval.scheme,
                query_id=qid,
                normalize=cfg.train.normalize_late_tokens,
            )
            for rank, (pid, score) in enumerate(
                zip(ranked.passage_ids, ranked.scores), start=1
            ):
                fh.write(f"{qid}\t{pid}\t{rank}\t{score!r}\n")
    logger.info("wrote rankings to %s", paths.ranking)
    return paths.ranking


def load_trainlog(path) -> TrainLog:
    return TrainLog.from_rows(formats.read_jsonl(path))
