"""Synthetic formula corpora for desk-scale experiments and tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formula_ir import FormulaRecord, OptTree, opt_to_opg

OPERATORS = {
    "+": 2, "-": 2, "*": 2, "/": 2, "^": 2, "=": 2, "<": 2,
    "sin": 1, "cos": 1, "log": 1, "exp": 1, "sqrt": 1, "sum": 3, "int": 3,
}
VARIABLES = tuple("abcdnxyzkt")
NUMBERS = tuple("0123456789")

TOPICS = {
    "calculus": "derivative integral limit continuous function converge tangent area rate",
    "algebra": "polynomial root factor equation coefficient quadratic solve linear group",
    "probability": "random variable expectation variance distribution probability event independent sample",
    "geometry": "triangle angle circle radius area perimeter polygon chord sine",
    "numbertheory": "prime divisor integer modulo congruence gcd residue factorization parity",
    "series": "series sum convergence term partial geometric harmonic ratio test",
    "analysis": "epsilon delta bound sequence supremum cauchy compact metric norm",
    "combinatorics": "choose binomial permutation counting subset arrangement pigeonhole graph path",
}
FILLER = "we have that then so the of is show prove how why can this given let find value".split()


def random_tree(rng: np.random.Generator, max_depth: int = 4, leaf_prob: float = 0.25) -> OptTree:
    ops = list(OPERATORS)

    def grow(depth: int) -> OptTree:
        if depth >= max_depth or (depth > 0 and rng.random() < leaf_prob + 0.15 * depth):
            pool = VARIABLES if rng.random() < 0.65 else NUMBERS
            return OptTree.leaf(str(pool[rng.integers(len(pool))]))
        op = ops[rng.integers(len(ops))]
        return OptTree.node(op, [grow(depth + 1) for _ in range(OPERATORS[op])])

    return grow(0)


def unique_trees(n: int, seed: int = 0, min_nodes: int = 4, max_nodes: int = 24) -> list[OptTree]:
    """``n`` random trees with pairwise distinct operator graphs."""
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    out: list[OptTree] = []
    while len(out) < n:
        t = random_tree(rng)
        if not min_nodes <= t.node_count <= max_nodes:
            continue
        key = opt_to_opg(t).to_json()
        if key in seen:
            continue
        seen.add(key)
        out.append(t)
    return out


def context_text(rng: np.random.Generator, topic: str, n_words: int = 30, topical: float = 0.5) -> str:
    topical_words = TOPICS[topic].split()
    words = [
        topical_words[rng.integers(len(topical_words))] if rng.random() < topical else FILLER[rng.integers(len(FILLER))]
        for _ in range(n_words)
    ]
    return " ".join(words)


def training_corpus(n: int = 1000, seed: int = 0) -> list[FormulaRecord]:
    topics = sorted(TOPICS)
    rng = np.random.default_rng(seed + 1)
    return [
        FormulaRecord(f"f{i:05d}", f"p{i:05d}", t.to_sexpr(), context_text(rng, topics[i % len(topics)]))
        for i, t in enumerate(unique_trees(n, seed))
    ]


def _rebuild(t: OptTree, v: int, replace: dict[int, OptTree]) -> OptTree:
    if v in replace:
        return replace[v]
    if not t.children[v]:
        return OptTree.leaf(t.labels[v])
    return OptTree.node(t.labels[v], [_rebuild(t, c, replace) for c in t.children[v]])


def rename_leaves(t: OptTree, rng: np.random.Generator, prob: float = 0.5) -> OptTree:
    labels = list(t.labels)
    for v, kids in enumerate(t.children):
        if not kids and labels[v] in VARIABLES and rng.random() < prob:
            labels[v] = VARIABLES[rng.integers(len(VARIABLES))]
    return OptTree(tuple(labels), t.children, t.root)


def edit_subtree(t: OptTree, rng: np.random.Generator) -> OptTree:
    """Replace one random non-root subtree with a small random tree."""
    if t.node_count < 2:
        return t
    v = int(rng.integers(1, t.node_count))
    return _rebuild(t, t.root, {v: random_tree(rng, max_depth=2)})


@dataclass
class DeskFixture:
    corpus: list[FormulaRecord]
    topics: list[FormulaRecord]
    qrels: list[tuple[str, str, int]]
    visual_ids: dict[str, str]


def desk_fixture(n_families: int = 120, n_distractors: int = 600, n_topics: int = 20, seed: int = 7) -> DeskFixture:
    """Families of related formulas with graded judgments for end-to-end runs.

    Each family has two copies of its base formula (grade 3, one visual id),
    three renamed-leaf variants (grade 2), two edited variants (grade 1) and
    one unjudged variant. Context text is drawn from the family's topic words.
    """
    rng = np.random.default_rng(seed)
    topic_names = sorted(TOPICS)
    bases = unique_trees(n_families + n_distractors, seed, min_nodes=5)
    corpus: list[FormulaRecord] = []
    family_members: dict[int, list[tuple[str, int | None]]] = {}
    post = 0

    def add(tree: OptTree, topic: str) -> str:
        nonlocal post
        fid = f"F{len(corpus) + 1:05d}"
        post += 1
        corpus.append(FormulaRecord(fid, f"P{post:05d}", tree.to_sexpr(), context_text(rng, topic)))
        return fid

    for f in range(n_families):
        base, topic = bases[f], topic_names[f % len(topic_names)]
        plan = [(base, 3), (base, 3)]
        plan += [(rename_leaves(base, rng), 2) for _ in range(3)]
        plan += [(edit_subtree(base, rng), 1) for _ in range(2)]
        plan += [(rename_leaves(base, rng), None)]
        family_members[f] = [(add(t, topic), grade) for t, grade in plan]
    distractor_ids = [
        add(t, topic_names[int(rng.integers(len(topic_names)))]) for t in bases[n_families:]
    ]

    # one visual id per distinct formula string
    first: dict[str, str] = {}
    visual_ids = {}
    for rec in corpus:
        visual_ids[rec.formula_id] = first.setdefault(rec.source_text, f"V{len(first) + 1:05d}")

    topics: list[FormulaRecord] = []
    qrels: dict[tuple[str, str], int] = {}
    for t in range(n_topics):
        f = int(t * n_families / n_topics)
        topic = topic_names[f % len(topic_names)]
        tid = f"T.{t + 1}"
        topics.append(FormulaRecord(tid, f"Q{t + 1:03d}", rename_leaves(bases[f], rng).to_sexpr(),
                                    context_text(rng, topic)))
        for fid, grade in family_members[f]:
            if grade is not None:
                key = (tid, visual_ids[fid])
                qrels[key] = max(qrels.get(key, 0), grade)
        for fid in rng.choice(distractor_ids, size=6, replace=False):
            qrels.setdefault((tid, visual_ids[str(fid)]), 0)
        other = [g for g in family_members if g != f]
        for g in rng.choice(other, size=2, replace=False):
            fid = family_members[int(g)][2][0]
            qrels.setdefault((tid, visual_ids[fid]), 1 if int(g) % len(topic_names) == f % len(topic_names) else 0)
    qrel_rows = [(tid, vid, grade) for (tid, vid), grade in sorted(qrels.items())]
    return DeskFixture(corpus, topics, qrel_rows, visual_ids)
