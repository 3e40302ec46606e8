"""File formats for corpora, queries, relevance labels, logs and metrics.

Corpora and queries are JSON-lines records ``{"id": int, "tokens": [int]}``
written canonically (sorted keys, compact separators) so identical data is
byte-identical. Relevance labels are tab-separated ``query_id passage_id 1``
lines. Metrics are a single canonical JSON object. Every reader/writer pair
round-trips exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ContractError

Record = tuple[int, list[int]]


def _dump_canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_records(records: list[Record], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, tokens in records:
            fh.write(_dump_canonical({"id": int(rid), "tokens": [int(t) for t in tokens]}))
            fh.write("\n")


def read_records(path) -> list[Record]:
    records: list[Record] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append((int(obj["id"]), [int(t) for t in obj["tokens"]]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ContractError(f"{path}:{line_no}: malformed record ({exc})") from exc
    return records


def write_qrels(qrels: dict[int, int], path) -> None:
    """One relevant passage per query: ``query_id<TAB>passage_id<TAB>1``."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            fh.write(f"{qid}\t{qrels[qid]}\t1\n")


def read_qrels(path) -> dict[int, int]:
    qrels: dict[int, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] != "1":
                raise ContractError(f"{path}:{line_no}: malformed qrels line {line!r}")
            qrels[int(parts[0])] = int(parts[1])
    return qrels


def validate_qrels(
    qrels: dict[int, int], queries: list[Record], corpus: list[Record]
) -> None:
    """Labels may reference only existing query and passage ids."""
    query_ids = {qid for qid, _ in queries}
    passage_ids = {pid for pid, _ in corpus}
    for qid, pid in qrels.items():
        if qid not in query_ids:
            raise ContractError(f"qrels reference unknown query id {qid}")
        if pid not in passage_ids:
            raise ContractError(f"qrels reference unknown passage id {pid}")


def write_jsonl(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(_dump_canonical(row))
            fh.write("\n")


def read_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_metrics(metrics: dict, path) -> None:
    Path(path).write_text(_dump_canonical(metrics) + "\n", encoding="utf-8")


def read_metrics(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
