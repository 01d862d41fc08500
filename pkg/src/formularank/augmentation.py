"""Stochastic views of operator graphs for contrastive training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .formula_ir import Edge, OpgGraph

MASK_TOKEN = "[MASK]"
WILDCARD_PREFIX = "W"
ABLATION_OPS = ("node_drop", "edge_perturb")


@dataclass(frozen=True)
class AugmentConfig:
    p1: float = 0.3
    p2: float = 0.005
    p3: float = 0.002
    mask_rate: float = 0.01
    rng_seed: int = 0
    # ablation switches; production training uses substitution + masking only
    substitution: bool = True
    masking: bool = True
    ablation_ops: tuple[str, ...] = ()
    ablation_rate: float = 0.1

    def __post_init__(self):
        for name in ("p1", "p2", "p3", "mask_rate", "ablation_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability, got {value}")
        unknown = set(self.ablation_ops) - set(ABLATION_OPS)
        if unknown:
            raise ValueError(f"unknown ablation ops {sorted(unknown)}")


class Edit(NamedTuple):
    node: int  # index in the output graph
    kind: str  # subst1 | subst2 | subst3 | mask | drop | perturb


@dataclass(frozen=True)
class AugmentedView:
    graph: OpgGraph
    provenance: tuple[Edit, ...] = field(default=())


def is_wildcard(label: str) -> bool:
    return len(label) > 1 and label[0] == WILDCARD_PREFIX and label[1:].isdigit()


def substitution_levels(g: OpgGraph) -> tuple[list[bool], list[bool], list[bool]]:
    """Flags for leaf, parent-of-leaf and grandparent-of-leaf nodes of ``g``."""
    kids = g.children
    leaf = [not k for k in kids]
    parent = [bool(k) and all(leaf[c] for c in k) for k in kids]
    grand = [bool(k) and any(parent[c] for c in k) for k in kids]
    return leaf, parent, grand


def _reachable(kids, root: int, detached: set[int]) -> list[bool]:
    seen = [False] * len(kids)
    seen[root] = True
    stack = [root]
    while stack:
        v = stack.pop()
        if v in detached:
            continue
        for c in kids[v]:
            if not seen[c]:
                seen[c] = True
                stack.append(c)
    return seen


class _WildcardSource:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.used: set[int] = set()

    def __call__(self) -> str:
        while True:
            n = int(self.rng.integers(0, 2**31))
            if n not in self.used:
                self.used.add(n)
                return f"{WILDCARD_PREFIX}{n}"


def substructure_substitute(g: OpgGraph, cfg: AugmentConfig, rng: np.random.Generator) -> AugmentedView:
    """Replace leaf / parent-of-leaf / grandparent-of-leaf substructures by wildcards.

    Level membership is computed once on ``g``. Orders are applied 3, 2, 1;
    a selected order-2/3 node is relabelled and loses its outgoing edges, and
    later orders only consider nodes still reachable from the root. Nodes
    left unreachable are pruned.
    """
    leaf, parent, grand = substitution_levels(g)
    kids = g.children
    n = g.node_count
    labels = list(g.labels)
    detached: set[int] = set()
    edits: list[tuple[int, str]] = []
    wildcard = _WildcardSource(rng)

    reach = [True] * n
    for order, members, prob in ((3, grand, cfg.p3), (2, parent, cfg.p2), (1, leaf, cfg.p1)):
        candidates = [v for v in range(n) if members[v]]
        draws = rng.random(len(candidates))
        if order < 3 and detached:
            reach = _reachable(kids, g.root, detached)
        for v, u in zip(candidates, draws):
            if u < prob and reach[v]:
                labels[v] = wildcard()
                if order > 1:
                    detached.add(v)
                edits.append((v, f"subst{order}"))

    if not detached:
        graph = g.with_labels(labels) if edits else g
        return AugmentedView(graph, tuple(Edit(v, k) for v, k in edits))

    reach = _reachable(kids, g.root, detached)
    new_id = {}
    for v in range(n):
        if reach[v]:
            new_id[v] = len(new_id)
    edges = tuple(
        Edge(new_id[p], new_id[c], pos)
        for p, c, pos in g.edges
        if p not in detached and reach[p]
    )
    graph = OpgGraph(tuple(labels[v] for v in range(n) if reach[v]), edges, new_id[g.root])
    return AugmentedView(graph, tuple(Edit(new_id[v], k) for v, k in edits if v in new_id))


def attribute_mask(g: OpgGraph, rate: float, rng: np.random.Generator) -> AugmentedView:
    """Replace each node label by ``[MASK]`` independently with probability ``rate``."""
    hits = np.flatnonzero(rng.random(g.node_count) < rate)
    if hits.size == 0:
        return AugmentedView(g)
    labels = list(g.labels)
    for v in hits:
        labels[v] = MASK_TOKEN
    return AugmentedView(g.with_labels(labels), tuple(Edit(int(v), "mask") for v in hits))


def node_drop(g: OpgGraph, rate: float, rng: np.random.Generator) -> AugmentedView:
    """Ablation only: delete non-root nodes with their edges. May break formula validity."""
    keep = rng.random(g.node_count) >= rate
    keep[g.root] = True
    new_id = {v: i for i, v in enumerate(np.flatnonzero(keep).tolist())}
    edges = tuple(
        Edge(new_id[p], new_id[c], pos) for p, c, pos in g.edges if keep[p] and keep[c]
    )
    labels = tuple(g.labels[v] for v in new_id)
    dropped = int((~keep).sum())
    return AugmentedView(OpgGraph(labels, edges, new_id[g.root]), (Edit(new_id[g.root], "drop"),) * bool(dropped))


def edge_perturb(g: OpgGraph, rate: float, rng: np.random.Generator) -> AugmentedView:
    """Ablation only: drop each edge with probability ``rate`` and add as many random ones."""
    n = g.node_count
    keep = rng.random(g.edge_count) >= rate
    edges = [e for e, k in zip(g.edges, keep) if k]
    added = int((~keep).sum())
    edits = []
    for _ in range(added if n > 1 else 0):
        p, c = rng.integers(0, n, size=2)
        edges.append(Edge(int(p), int(c), -1))
        edits.append(Edit(int(p), "perturb"))
    return AugmentedView(OpgGraph(g.labels, tuple(edges), g.root), tuple(edits))


def augment_view(g: OpgGraph, cfg: AugmentConfig, rng: np.random.Generator) -> AugmentedView:
    view = AugmentedView(g)
    steps = []
    if cfg.substitution:
        steps.append(lambda h: substructure_substitute(h, cfg, rng))
    for op in cfg.ablation_ops:
        fn = node_drop if op == "node_drop" else edge_perturb
        steps.append(lambda h, fn=fn: fn(h, cfg.ablation_rate, rng))
    if cfg.masking:
        steps.append(lambda h: attribute_mask(h, cfg.mask_rate, rng))
    for step in steps:
        out = step(view.graph)
        view = AugmentedView(out.graph, view.provenance + out.provenance)
    return view


def augment_pair(
    g: OpgGraph, cfg: AugmentConfig, rng: np.random.Generator | None = None
) -> tuple[AugmentedView, AugmentedView]:
    """Two independent augmented views of ``g`` (a positive pair)."""
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    return augment_view(g, cfg, rng), augment_view(g, cfg, rng)
