"""Two-stage retrieval: exact structural shortlist, then weighted fusion with semantics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

BLOCK_ROWS = 65536


@dataclass(frozen=True)
class SearchConfig:
    lam: float = 0.5
    stage1_k: int = 500_000
    final_n: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not 1 <= self.final_n <= self.stage1_k:
            raise ValueError("need 1 <= final_n <= stage1_k")


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


class VectorIndex:
    """Structural vectors for every formula plus semantic vectors where available.

    Rows are re-normalised on construction. ``semantic`` may be None or have
    all-zero rows for formulas without context; those score 0 semantically.
    """

    def __init__(self, ids: Sequence[str], structural: np.ndarray, semantic: np.ndarray | None = None,
                 post_ids: Sequence[str] | None = None):
        structural = np.asarray(structural, dtype=np.float64)
        if structural.ndim != 2 or structural.shape[0] != len(ids):
            raise ValueError("structural matrix needs one row per id")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate formula ids in index")
        self.ids = list(ids)
        self.post_ids = list(post_ids) if post_ids is not None else [""] * len(ids)
        self.S = _unit_rows(structural)
        if semantic is not None:
            semantic = np.asarray(semantic, dtype=np.float64)
            if semantic.shape[0] != len(ids):
                raise ValueError("semantic matrix needs one row per id")
            semantic = _unit_rows(semantic)
        self.T = semantic
        # rank of each id under byte-wise ordering, for tie-breaks
        order = sorted(range(len(ids)), key=lambda i: self.ids[i].encode("utf-8"))
        self.id_rank = np.empty(len(ids), dtype=np.int64)
        self.id_rank[order] = np.arange(len(ids))
        self._pos = {fid: i for i, fid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def struct_dim(self) -> int:
        return self.S.shape[1]

    @property
    def sem_dim(self) -> int | None:
        return None if self.T is None else self.T.shape[1]

    def position(self, formula_id: str) -> int:
        return self._pos[formula_id]

    @classmethod
    def from_semantic_map(cls, ids, structural, vectors: dict, dim: int, post_ids=None) -> VectorIndex:
        T = np.zeros((len(ids), dim))
        for i, fid in enumerate(ids):
            sv = vectors.get(fid)
            if sv is not None:
                T[i] = sv.v
        return cls(ids, structural, T, post_ids)


def structural_scores(q: np.ndarray, index: VectorIndex) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.struct_dim,):
        raise ValueError(f"query has dimension {q.shape}, index expects {index.struct_dim}")
    out = np.empty(len(index))
    for start in range(0, len(index), BLOCK_ROWS):
        out[start : start + BLOCK_ROWS] = index.S[start : start + BLOCK_ROWS] @ q
    return out


def _top(scores: np.ndarray, id_rank: np.ndarray, k: int) -> np.ndarray:
    """Positions of the ``k`` best scores, ties by ascending id bytes."""
    m = scores.shape[0]
    k = min(k, m)
    if k < m:
        kth = np.partition(-scores, k - 1)[k - 1]
        cand = np.flatnonzero(-scores <= kth)
    else:
        cand = np.arange(m)
    order = np.lexsort((id_rank[cand], -scores[cand]))
    return cand[order[:k]]


def stage1_topk(q_struct: np.ndarray, index: VectorIndex, k: int) -> list[tuple[str, float]]:
    """Exact top-``k`` by cosine; ``k`` is clamped to the index size."""
    if len(index) == 0:
        raise ValueError("empty index")
    if k < 1:
        raise ValueError("k must be positive")
    scores = structural_scores(q_struct, index)
    return [(index.ids[i], float(scores[i])) for i in _top(scores, index.id_rank, k)]


def fuse(s_struct, s_sem, lam: float):
    """``lam * s_struct + (1 - lam) * s_sem``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    return lam * s_struct + (1.0 - lam) * s_sem


class ScoredResult(NamedTuple):
    formula_id: str
    s_struct: float
    s_sem: float
    s_final: float
    rank: int


def search_vectors(q_struct: np.ndarray, q_sem: np.ndarray | None, index: VectorIndex,
                   cfg: SearchConfig) -> list[ScoredResult]:
    """Both stages for an already-embedded query."""
    if len(index) == 0:
        raise ValueError("empty index")
    scores = structural_scores(q_struct, index)
    short = _top(scores, index.id_rank, cfg.stage1_k)
    s_struct = scores[short]
    s_sem = np.zeros(len(short))
    if q_sem is not None and index.T is not None:
        q_sem = np.asarray(q_sem, dtype=np.float64)
        if q_sem.shape != (index.T.shape[1],):
            raise ValueError(f"semantic query has dimension {q_sem.shape}, index expects {index.T.shape[1]}")
        norm = np.linalg.norm(q_sem)
        if norm > 0:
            s_sem = index.T[short] @ (q_sem / norm)
    final = fuse(s_struct, s_sem, cfg.lam)
    order = np.lexsort((index.id_rank[short], -final))[: cfg.final_n]
    return [
        ScoredResult(index.ids[short[j]], float(s_struct[j]), float(s_sem[j]), float(final[j]), r)
        for r, j in enumerate(order, 1)
    ]


# ---------------------------------------------------------------------------
# run files: topic_id, formula_id, post_id, rank, score, run_tag


class RunRow(NamedTuple):
    topic_id: str
    formula_id: str
    post_id: str
    rank: int
    score: float
    tag: str


def format_run(rows: Iterable[RunRow]) -> str:
    return "".join(
        f"{r.topic_id}\t{r.formula_id}\t{r.post_id}\t{r.rank}\t{r.score:.8f}\t{r.tag}\n" for r in rows
    )


def write_run(path, rows: Iterable[RunRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_run(rows))


def parse_run(lines: Iterable[str]) -> list[RunRow]:
    rows = []
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t") if "\t" in line else line.split()
        if len(fields) != 6:
            raise ValueError(f"run line {lineno}: expected 6 columns, got {len(fields)}")
        try:
            rows.append(RunRow(fields[0], fields[1], fields[2], int(fields[3]), float(fields[4]), fields[5]))
        except ValueError as exc:
            raise ValueError(f"run line {lineno}: {exc}") from exc
    return rows


def read_run(path) -> list[RunRow]:
    with open(path, encoding="utf-8") as fh:
        return parse_run(fh)


def results_to_rows(topic_id: str, results: Sequence[ScoredResult], index: VectorIndex, tag: str) -> list[RunRow]:
    return [
        RunRow(topic_id, r.formula_id, index.post_ids[index.position(r.formula_id)], r.rank, r.s_final, tag)
        for r in results
    ]


def batch_search_vectors(
    topics: Sequence[tuple[str, np.ndarray, np.ndarray | None]],
    index: VectorIndex,
    cfg: SearchConfig,
    tag: str = "run",
) -> tuple[list[RunRow], dict[str, str]]:
    """Search every ``(topic_id, q_struct, q_sem)``; failures are collected, not raised."""
    rows: list[RunRow] = []
    errors: dict[str, str] = {}
    for topic_id, q_struct, q_sem in topics:
        try:
            rows += results_to_rows(topic_id, search_vectors(q_struct, q_sem, index, cfg), index, tag)
        except ValueError as exc:
            log.error("topic %s failed: %s", topic_id, exc)
            errors[topic_id] = str(exc)
    return rows, errors
