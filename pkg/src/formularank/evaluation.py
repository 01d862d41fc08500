"""ARQMath-style primed metrics and reciprocal rank fusion."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

from .retrieval import RunRow

RELEVANT_GRADE = 2  # medium and high

# Published full-scale results (76 topics, imported sentence vectors) kept as a
# reference for the optional full-data run; no tolerance is claimed against them.
FULL_SCALE_REFERENCE = {"nDCG'@10": 0.7343, "P'@5": 0.7632, "P'@10": 0.6803}

Qrels = dict[str, dict[str, int]]


def parse_qrels(lines: Iterable[str]) -> Qrels:
    """``topic_id, visual_id, unused, grade`` rows into ``{topic: {visual_id: grade}}``."""
    qrels: Qrels = defaultdict(dict)
    for lineno, line in enumerate(lines, 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 4:
            raise ValueError(f"qrels line {lineno}: expected 4 columns, got {len(fields)}")
        topic, vid, _, grade = fields
        if vid in qrels[topic]:
            raise ValueError(f"qrels line {lineno}: duplicate judgment for ({topic}, {vid})")
        g = int(grade)
        if g not in (0, 1, 2, 3):
            raise ValueError(f"qrels line {lineno}: grade {g} outside 0..3")
        qrels[topic][vid] = g
    return dict(qrels)


def parse_visual_map(lines: Iterable[str]) -> dict[str, str]:
    vmap = {}
    for lineno, line in enumerate(lines, 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 2:
            raise ValueError(f"visual map line {lineno}: expected 2 columns")
        vmap[fields[0]] = fields[1]
    return vmap


def _read(path, parser):
    with open(path, encoding="utf-8") as fh:
        return parser(fh)


def read_qrels(path) -> Qrels:
    return _read(path, parse_qrels)


def read_visual_map(path) -> dict[str, str]:
    return _read(path, parse_visual_map)


class JudgedRow(NamedTuple):
    topic_id: str
    formula_id: str
    visual_id: str
    rank: int
    grade: int


def group_by_topic(run: Iterable[RunRow]) -> dict[str, list[RunRow]]:
    by_topic: dict[str, list[RunRow]] = defaultdict(list)
    for row in run:
        by_topic[row.topic_id].append(row)
    for rows in by_topic.values():
        rows.sort(key=lambda r: r.rank)
    return dict(by_topic)


@dataclass
class FilterCounts:
    judged: int = 0
    unjudged: int = 0
    deduped: int = 0


def dedup_and_prime(
    run: Iterable[RunRow], qrels: Qrels, vmap: Mapping[str, str], counts: FilterCounts | None = None
) -> dict[str, list[JudgedRow]]:
    """Keep the best-ranked instance per visual id, drop unjudged rows, re-rank from 1.

    Formula ids missing from ``vmap`` stand for their own visual id.
    """
    counts = counts if counts is not None else FilterCounts()
    out: dict[str, list[JudgedRow]] = {}
    for topic, rows in group_by_topic(run).items():
        judged = qrels.get(topic, {})
        seen: set[str] = set()
        kept: list[JudgedRow] = []
        for row in rows:
            vid = vmap.get(row.formula_id, row.formula_id)
            if vid in seen:
                counts.deduped += 1
                continue
            seen.add(vid)
            if vid not in judged:
                counts.unjudged += 1
                continue
            counts.judged += 1
            kept.append(JudgedRow(topic, row.formula_id, vid, len(kept) + 1, judged[vid]))
        out[topic] = kept
    return out


def _check_k(k: int):
    if k < 1:
        raise ValueError("k must be at least 1")


def p_prime_at_k_topic(rows: Sequence[JudgedRow], k: int) -> float:
    _check_k(k)
    return sum(1 for r in rows[:k] if r.grade >= RELEVANT_GRADE) / k


def dcg(grades: Iterable[int], k: int) -> float:
    return sum((2**g - 1) / math.log2(i + 1) for i, g in enumerate(list(grades)[:k], 1))


def ndcg_prime_at_k_topic(rows: Sequence[JudgedRow], judged: Mapping[str, int], k: int) -> float | None:
    """nDCG'@k for one topic, or None when the topic has no positive grades."""
    _check_k(k)
    ideal = dcg(sorted(judged.values(), reverse=True), k)
    if ideal == 0:
        return None
    return dcg((r.grade for r in rows), k) / ideal


def p_prime_at_k(filtered: Mapping[str, Sequence[JudgedRow]], qrels: Qrels, k: int, per_topic: dict | None = None) -> float:
    """Mean P'@k over the judged topics; topics without results score 0."""
    _check_k(k)
    values = []
    for topic in sorted(qrels):
        v = p_prime_at_k_topic(filtered.get(topic, []), k)
        if per_topic is not None:
            per_topic[topic] = v
        values.append(v)
    return sum(values) / len(values) if values else 0.0


def ndcg_prime_at_k(filtered: Mapping[str, Sequence[JudgedRow]], qrels: Qrels, k: int, per_topic: dict | None = None) -> float:
    """Mean nDCG'@k over judged topics with non-zero ideal DCG."""
    _check_k(k)
    values = []
    for topic in sorted(qrels):
        v = ndcg_prime_at_k_topic(filtered.get(topic, []), qrels[topic], k)
        if v is None:
            continue
        if per_topic is not None:
            per_topic[topic] = v
        values.append(v)
    return sum(values) / len(values) if values else 0.0


@dataclass
class EvalReport:
    p5: float
    p10: float
    ndcg10: float
    per_topic: dict[str, dict[str, float]] = field(default_factory=dict)
    judged: int = 0
    unjudged: int = 0
    deduped: int = 0

    def to_dict(self) -> dict:
        r6 = lambda x: round(x, 6)  # noqa: E731
        return {
            "P'@5": r6(self.p5),
            "P'@10": r6(self.p10),
            "nDCG'@10": r6(self.ndcg10),
            "counts": {"judged": self.judged, "unjudged": self.unjudged, "deduped": self.deduped},
            "per_topic": {t: {m: r6(v) for m, v in sorted(ms.items())} for t, ms in sorted(self.per_topic.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        lines = ["topic".ljust(16) + "nDCG'@10".rjust(10) + "P'@5".rjust(8) + "P'@10".rjust(8)]
        for t, ms in sorted(self.per_topic.items()):
            nd = ms.get("nDCG'@10")
            p5, p10 = ms["P'@5"], ms["P'@10"]
            lines.append(f"{t:<16}{'-' if nd is None else f'{nd:.4f}':>10}{p5:>8.4f}{p10:>8.4f}")
        lines.append(f"{'all':<16}{self.ndcg10:>10.4f}{self.p5:>8.4f}{self.p10:>8.4f}")
        lines.append(f"judged {self.judged}  unjudged {self.unjudged}  deduped {self.deduped}")
        return "\n".join(lines) + "\n"


def evaluate(run: Iterable[RunRow], qrels: Qrels, vmap: Mapping[str, str]) -> EvalReport:
    counts = FilterCounts()
    filtered = dedup_and_prime(run, qrels, vmap, counts)
    p5_t: dict[str, float] = {}
    p10_t: dict[str, float] = {}
    nd_t: dict[str, float] = {}
    report = EvalReport(
        p_prime_at_k(filtered, qrels, 5, p5_t),
        p_prime_at_k(filtered, qrels, 10, p10_t),
        ndcg_prime_at_k(filtered, qrels, 10, nd_t),
        judged=counts.judged,
        unjudged=counts.unjudged,
        deduped=counts.deduped,
    )
    for t in sorted(qrels):
        ms = {"P'@5": p5_t[t], "P'@10": p10_t[t]}
        if t in nd_t:
            ms["nDCG'@10"] = nd_t[t]
        report.per_topic[t] = ms
    return report


def rrf_combine(runs: Sequence[Iterable[RunRow]], k_rrf: float = 60, depth: int = 1000, tag: str = "rrf") -> list[RunRow]:
    """Reciprocal rank fusion: ``sum over runs of 1 / (k_rrf + rank)`` for rows within ``depth``."""
    if len(runs) < 2:
        raise ValueError("rank fusion needs at least two runs")
    scores: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
    post_of: dict[tuple[str, str], str] = {}
    for run in runs:
        for topic, rows in group_by_topic(run).items():
            for row in rows:
                if row.rank > depth:
                    break
                scores[topic][row.formula_id] += 1.0 / (k_rrf + row.rank)
                post_of.setdefault((topic, row.formula_id), row.post_id)
    out: list[RunRow] = []
    for topic in sorted(scores):
        ranked = sorted(scores[topic].items(), key=lambda kv: (-kv[1], kv[0].encode("utf-8")))[:depth]
        out += [RunRow(topic, fid, post_of[(topic, fid)], r, s, tag) for r, (fid, s) in enumerate(ranked, 1)]
    return out
