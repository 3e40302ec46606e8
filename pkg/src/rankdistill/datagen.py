"""Synthetic retrieval tasks with a known gold passage per query.

Passages are bags of tokens drawn from disjoint per-topic pools; each query
samples its tokens from one gold passage, with a configurable fraction
replaced by off-topic noise. The structure is learnable by token overlap,
which gives the whole pipeline a ground truth that a lexical ranker can
sanity-check.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .encoder import N_SPECIAL_TOKENS
from .errors import TaskSpecError
from .formats import Record, write_qrels, write_records
from .rng import RngState


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 1024
    n_topics: int = 50
    passages_per_topic: int = 40
    passage_len: tuple[int, int] = (10, 16)
    query_len: tuple[int, int] = (5, 10)
    query_noise_rate: float = 0.15
    n_train_queries: int = 400
    n_dev_queries: int = 100
    n_test_queries: int = 100
    topic_pool_size: int = 20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.query_noise_rate < 1.0:
            raise TaskSpecError(f"query_noise_rate must be in [0, 1), got {self.query_noise_rate}")
        content = self.vocab_size - N_SPECIAL_TOKENS
        if self.n_topics * self.topic_pool_size > content:
            raise TaskSpecError(
                f"vocabulary too small: {self.n_topics} topics x {self.topic_pool_size} "
                f"pool tokens need more than the {content} available content tokens"
            )
        for name, (lo, hi) in (("passage_len", self.passage_len), ("query_len", self.query_len)):
            if lo < 1 or hi < lo:
                raise TaskSpecError(f"{name} range {lo}..{hi} is invalid")
        if self.n_topics < 1 or self.passages_per_topic < 1:
            raise TaskSpecError("need at least one topic and one passage per topic")

    @property
    def corpus_size(self) -> int:
        return self.n_topics * self.passages_per_topic


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    corpus: list[Record]
    passage_topic: list[int]  # topic index per passage
    queries: dict[str, list[Record]]  # split -> records
    qrels: dict[str, dict[int, int]]  # split -> query id -> gold passage id


def _draw_length(rng: RngState, bounds: tuple[int, int]) -> int:
    lo, hi = bounds
    return lo + rng.randint(hi - lo + 1)


def build_task(spec: SyntheticTaskSpec) -> SyntheticTask:
    """Materialize the corpus, query splits and gold labels in memory."""
    rng = RngState(spec.seed).child("datagen")
    content_first = N_SPECIAL_TOKENS
    content_count = spec.vocab_size - content_first

    # Disjoint topic pools over a shuffled content vocabulary.
    shuffled = rng.permutation(content_count)
    pools: list[list[int]] = []
    for t in range(spec.n_topics):
        chunk = shuffled[t * spec.topic_pool_size : (t + 1) * spec.topic_pool_size]
        pools.append([content_first + c for c in chunk])
    off_topic: list[list[int]] = []
    for t in range(spec.n_topics):
        pool_set = set(pools[t])
        off_topic.append(
            [content_first + c for c in range(content_count) if content_first + c not in pool_set]
        )

    corpus: list[Record] = []
    passage_topic: list[int] = []
    for topic in range(spec.n_topics):
        pool = pools[topic]
        for _ in range(spec.passages_per_topic):
            length = _draw_length(rng, spec.passage_len)
            tokens = [pool[rng.randint(len(pool))] for _ in range(length)]
            corpus.append((len(corpus), tokens))
            passage_topic.append(topic)

    queries: dict[str, list[Record]] = {}
    qrels: dict[str, dict[int, int]] = {}
    next_qid = 0
    for split, count in (
        ("train", spec.n_train_queries),
        ("dev", spec.n_dev_queries),
        ("test", spec.n_test_queries),
    ):
        split_queries: list[Record] = []
        split_qrels: dict[int, int] = {}
        for _ in range(count):
            gold_pid = rng.randint(spec.corpus_size)
            gold_tokens = corpus[gold_pid][1]
            noise_pool = off_topic[passage_topic[gold_pid]]
            length = _draw_length(rng, spec.query_len)
            tokens = []
            for _ in range(length):
                if spec.query_noise_rate > 0.0 and rng.uniform() < spec.query_noise_rate:
                    tokens.append(noise_pool[rng.randint(len(noise_pool))])
                else:
                    tokens.append(gold_tokens[rng.randint(len(gold_tokens))])
            split_queries.append((next_qid, tokens))
            split_qrels[next_qid] = gold_pid
            next_qid += 1
        queries[split] = split_queries
        qrels[split] = split_qrels
    return SyntheticTask(
        spec=spec, corpus=corpus, passage_topic=passage_topic, queries=queries, qrels=qrels
    )


@dataclass
class TaskFiles:
    corpus: Path
    queries: dict[str, Path]
    qrels: dict[str, Path]


def generate_task(spec: SyntheticTaskSpec, out_dir) -> TaskFiles:
    """Generate and write the task files; byte-identical for equal specs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task = build_task(spec)
    corpus_path = out / "corpus.jsonl"
    write_records(task.corpus, corpus_path)
    query_paths: dict[str, Path] = {}
    qrel_paths: dict[str, Path] = {}
    for split in ("train", "dev", "test"):
        query_paths[split] = out / f"queries_{split}.jsonl"
        qrel_paths[split] = out / f"qrels_{split}.tsv"
        write_records(task.queries[split], query_paths[split])
        write_qrels(task.qrels[split], qrel_paths[split])
    return TaskFiles(corpus=corpus_path, queries=query_paths, qrels=qrel_paths)
