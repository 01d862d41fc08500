"""Ingested corpus store: one JSON object per line."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

from .formula_ir import FormulaRecord, OpgGraph


@dataclass(frozen=True)
class StoreEntry:
    record: FormulaRecord
    graph: OpgGraph
    train: bool


def write_store(path, entries: Iterable[StoreEntry]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            obj = {
                "formula_id": e.record.formula_id,
                "post_id": e.record.post_id,
                "opt": e.record.source_text,
                "context": e.record.context,
                "train": e.train,
                "opg": json.loads(e.graph.to_json()),
            }
            fh.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def read_store(path) -> list[StoreEntry]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = FormulaRecord(obj["formula_id"], obj["post_id"], obj["opt"], obj["context"])
                out.append(StoreEntry(rec, OpgGraph.from_json(obj["opg"]), bool(obj["train"])))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"store line {lineno}: {exc}") from exc
    return out
