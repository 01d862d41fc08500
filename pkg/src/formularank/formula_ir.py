"""Operator trees, shared-subtree operator graphs and the parsers that build them."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple, Sequence


class ParseError(ValueError):
    """Malformed formula source. ``offset`` is a byte offset into the UTF-8 source."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class UnsupportedConstruct(ParseError):
    """A LaTeX token outside the supported subset."""

    def __init__(self, token: str, offset: int):
        super().__init__(f"unsupported construct {token!r}", offset)
        self.token = token


@dataclass(frozen=True)
class OptTree:
    """Rooted ordered labelled tree. Nodes are numbered in preorder, so the root is 0."""

    labels: tuple[str, ...]
    children: tuple[tuple[int, ...], ...]
    root: int = 0

    def __post_init__(self):
        n = len(self.labels)
        if n == 0 or len(self.children) != n:
            raise ValueError("tree needs one child list per node and at least one node")
        parent_count = [0] * n
        for kids in self.children:
            for c in kids:
                if not 0 <= c < n:
                    raise ValueError(f"child index {c} out of range")
                parent_count[c] += 1
        if parent_count[self.root] != 0:
            raise ValueError("root has a parent")
        if any(parent_count[v] != 1 for v in range(n) if v != self.root):
            raise ValueError("every non-root node needs exactly one parent")

    @property
    def node_count(self) -> int:
        return len(self.labels)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple("operator" if kids else "operand" for kids in self.children)

    @classmethod
    def leaf(cls, label: str) -> OptTree:
        return cls((label,), ((),))

    @classmethod
    def node(cls, label: str, args: Sequence[OptTree]) -> OptTree:
        """Build ``(label args...)`` from subtrees, renumbering in preorder."""
        labels = [label]
        children: list[tuple[int, ...]] = [()]
        kid_ids = []
        for sub in args:
            base = len(labels)
            kid_ids.append(base + sub.root)
            labels.extend(sub.labels)
            children.extend(tuple(base + c for c in kids) for kids in sub.children)
        children[0] = tuple(kid_ids)
        return _preorder(labels, children, 0)

    def to_sexpr(self) -> str:
        return _sexpr(self.labels, self.children, self.root)

    def __str__(self) -> str:
        return self.to_sexpr()


def _preorder(labels, children, root) -> OptTree:
    order = []
    stack = [root]
    while stack:
        v = stack.pop()
        order.append(v)
        stack.extend(reversed(children[v]))
    new_id = {old: i for i, old in enumerate(order)}
    return OptTree(
        tuple(labels[v] for v in order),
        tuple(tuple(new_id[c] for c in children[v]) for v in order),
        0,
    )


def _sexpr(labels, children, root) -> str:
    parts: list[str] = []

    def emit(v):
        if not children[v]:
            parts.append(labels[v])
            return
        parts.append("(" + labels[v])
        for c in children[v]:
            parts.append(" ")
            emit(c)
        parts.append(")")

    emit(root)
    return "".join(parts)


class Edge(NamedTuple):
    parent: int
    child: int
    pos: int


@dataclass(frozen=True)
class OpgGraph:
    """Labelled DAG; ``edges`` are ``(parent, child, arg_position)`` triples.

    Build one from a tree with :func:`opt_to_opg`; augmentation produces graphs
    that are still valid DAGs but no longer maximally shared.
    """

    labels: tuple[str, ...]
    edges: tuple[Edge, ...]
    root: int = 0

    @property
    def node_count(self) -> int:
        return len(self.labels)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids: list[list[tuple[int, int]]] = [[] for _ in self.labels]
        for p, c, pos in self.edges:
            kids[p].append((pos, c))
        return tuple(tuple(c for _, c in sorted(k)) for k in kids)

    @cached_property
    def parents(self) -> tuple[tuple[int, ...], ...]:
        ps: list[list[int]] = [[] for _ in self.labels]
        for p, c, _ in self.edges:
            ps[c].append(p)
        return tuple(tuple(p) for p in ps)

    def with_labels(self, labels: Sequence[str]) -> OpgGraph:
        return OpgGraph(tuple(labels), self.edges, self.root)

    def to_json(self) -> str:
        return json.dumps(
            {"nodes": list(self.labels), "edges": [list(e) for e in self.edges], "root": self.root},
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, text: str) -> OpgGraph:
        obj = json.loads(text) if isinstance(text, str) else text
        return cls(
            tuple(obj["nodes"]),
            tuple(Edge(*map(int, e)) for e in obj["edges"]),
            int(obj["root"]),
        )


def validate_opg(g: OpgGraph) -> list[str]:
    """Return a list of problems; empty means ``g`` is a well-formed single-rooted DAG."""
    n = g.node_count
    problems = []
    if n == 0:
        return ["graph has no nodes"]
    if not 0 <= g.root < n:
        return [f"root {g.root} out of range"]
    positions: dict[int, list[int]] = {}
    for p, c, pos in g.edges:
        if not (0 <= p < n and 0 <= c < n):
            problems.append(f"edge ({p}, {c}) out of range")
            continue
        positions.setdefault(p, []).append(pos)
    if problems:
        return problems
    for p, ps in positions.items():
        if sorted(ps) != list(range(len(ps))):
            problems.append(f"node {p} has arg positions {sorted(ps)}")
    indeg = [0] * n
    for _, c, _ in g.edges:
        indeg[c] += 1
    roots = [v for v in range(n) if indeg[v] == 0]
    if roots != [g.root]:
        problems.append(f"expected single root {g.root}, in-degree-0 nodes are {roots}")
    # Kahn's algorithm: every node must be consumed, otherwise there is a cycle
    remaining = list(indeg)
    queue = [v for v in range(n) if remaining[v] == 0]
    seen = 0
    while queue:
        v = queue.pop()
        seen += 1
        for c in g.children[v]:
            remaining[c] -= 1
            if remaining[c] == 0:
                queue.append(c)
    if seen != n:
        problems.append("graph has a cycle")
    return problems


def is_valid_opg(g: OpgGraph) -> bool:
    return not validate_opg(g)


def share_map(t: OptTree) -> tuple[list[int], list[str], list[tuple[int, ...]]]:
    """Hash-cons ``t`` bottom-up.

    Returns ``(node_of, labels, children)``: the shared-node id of every tree
    node plus the label and ordered child ids of every shared node. Shared
    nodes are numbered by first preorder visit, so the root is 0.
    """
    n = t.node_count
    raw_id = [0] * n
    table: dict[tuple[str, tuple[int, ...]], int] = {}
    raw_keys: list[tuple[str, tuple[int, ...]]] = []
    order = []
    stack = [t.root]
    while stack:
        v = stack.pop()
        order.append(v)
        stack.extend(reversed(t.children[v]))
    # reversed preorder visits children before parents
    for v in reversed(order):
        key = (t.labels[v], tuple(raw_id[c] for c in t.children[v]))
        nid = table.get(key)
        if nid is None:
            nid = table[key] = len(raw_keys)
            raw_keys.append(key)
        raw_id[v] = nid
    renumber: dict[int, int] = {}
    for v in order:
        renumber.setdefault(raw_id[v], len(renumber))
    labels = [""] * len(raw_keys)
    children: list[tuple[int, ...]] = [()] * len(raw_keys)
    for old, (label, kids) in enumerate(raw_keys):
        new = renumber[old]
        labels[new] = label
        children[new] = tuple(renumber[k] for k in kids)
    return [renumber[raw_id[v]] for v in range(n)], labels, children


def opt_to_opg(t: OptTree) -> OpgGraph:
    """Merge identical subtrees of ``t`` into single nodes.

    Two subtrees share a node iff their labels and ordered child node ids
    agree. Commutative operators are not normalised.
    """
    _, labels, children = share_map(t)
    edges = tuple(Edge(p, c, i) for p, kids in enumerate(children) for i, c in enumerate(kids))
    return OpgGraph(tuple(labels), edges, 0)


def unfold(g: OpgGraph) -> OptTree:
    """Expand shared nodes back into a tree by duplication."""
    labels: list[str] = []
    children: list[tuple[int, ...]] = []

    def build(v: int) -> int:
        me = len(labels)
        labels.append(g.labels[v])
        children.append(())
        children[me] = tuple(build(c) for c in g.children[v])
        return me

    build(g.root)
    return OptTree(tuple(labels), tuple(children), 0)


class OpgStats(NamedTuple):
    node_count: int
    edge_count: int
    leaf_count: int
    depth: int


def opg_stats(g: OpgGraph) -> OpgStats:
    kids = g.children
    leaf_count = sum(1 for k in kids if not k)
    # longest path in a DAG: children-first memoised search from the root
    depth_of: dict[int, int] = {}
    stack = [(g.root, False)]
    while stack:
        v, expanded = stack.pop()
        if v in depth_of:
            continue
        if expanded or not kids[v]:
            depth_of[v] = 1 + max((depth_of[c] for c in kids[v]), default=-1)
            continue
        stack.append((v, True))
        stack.extend((c, False) for c in kids[v] if c not in depth_of)
    return OpgStats(g.node_count, g.edge_count, leaf_count, depth_of[g.root])


# ---------------------------------------------------------------------------
# s-expression front end

_SEXPR_TOKEN = re.compile(r"\s*(?:(\()|(\))|([^\s()]+))")


def _byte_offset(src: str, char_pos: int) -> int:
    return len(src[:char_pos].encode("utf-8"))


def parse_opt_sexpr(src: str) -> OptTree:
    """Parse a prefix expression such as ``(= (+ a b) 1)`` into an :class:`OptTree`."""
    tokens: list[tuple[str, str, int]] = []
    pos = 0
    while True:
        m = _SEXPR_TOKEN.match(src, pos)
        if m is None or m.end() == pos:
            break
        kind = "(" if m.group(1) else ")" if m.group(2) else "atom"
        start = m.start(m.lastindex)
        tokens.append((kind, m.group(m.lastindex), start))
        pos = m.end()
    if not tokens:
        raise ParseError("empty input", _byte_offset(src, len(src)))

    labels: list[str] = []
    children: list[list[int]] = []
    i = 0

    def err(msg, char_pos):
        return ParseError(msg, _byte_offset(src, char_pos))

    def parse() -> int:
        nonlocal i
        if i >= len(tokens):
            raise err("unexpected end of input", len(src))
        kind, text, at = tokens[i]
        i += 1
        if kind == "atom":
            labels.append(text)
            children.append([])
            return len(labels) - 1
        if kind == ")":
            raise err("unexpected ')'", at)
        if i >= len(tokens):
            raise err("unexpected end of input", len(src))
        kind, text, head_at = tokens[i]
        if kind == ")":
            raise err("empty list", at)
        if kind == "(":
            raise err("list head must be an atom", head_at)
        i += 1
        me = len(labels)
        labels.append(text)
        children.append([])
        while True:
            if i >= len(tokens):
                raise err("unexpected end of input", len(src))
            if tokens[i][0] == ")":
                i += 1
                break
            children[me].append(parse())
        if not children[me]:
            raise err(f"operator {text!r} has no operands", head_at)
        return me

    root = parse()
    if i != len(tokens):
        raise err("trailing input after expression", tokens[i][2])
    return OptTree(tuple(labels), tuple(tuple(c) for c in children), root)


# ---------------------------------------------------------------------------
# LaTeX subset front end (Pratt parser)

LATEX_FUNCTIONS = ("sin", "cos", "log", "exp", "sum", "int")
_LATEX_TOKEN = re.compile(
    r"\s*(?:(?P<num>\d+(?:\.\d+)?)|(?P<cmd>\\[A-Za-z]+|\\.)|(?P<ident>[A-Za-z])|(?P<sym>\S))"
)
_OPERATOR_COMMANDS = {"\\cdot": "*", "\\times": "*"}

# binding powers
_BP_EQ, _BP_ADD, _BP_MUL, _BP_IMPLICIT, _BP_UNARY, _BP_POW = 10, 20, 30, 40, 45, 50


class _Tok(NamedTuple):
    kind: str
    text: str
    at: int


class _LatexParser:
    def __init__(self, src: str):
        self.src = src
        self.tokens: list[_Tok] = []
        pos = 0
        while True:
            m = _LATEX_TOKEN.match(src, pos)
            if m is None:
                break
            kind = m.lastgroup
            self.tokens.append(_Tok(kind, m.group(kind), m.start(kind)))
            pos = m.end()
        self.tokens.append(_Tok("end", "", len(src)))
        self.i = 0

    def error(self, msg, tok):
        return ParseError(msg, _byte_offset(self.src, tok.at))

    def unsupported(self, tok):
        return UnsupportedConstruct(tok.text, _byte_offset(self.src, tok.at))

    def peek(self) -> _Tok:
        return self.tokens[self.i]

    def advance(self) -> _Tok:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text):
        tok = self.advance()
        if tok.text != text or tok.kind == "end":
            raise self.error(f"expected {text!r}", tok)
        return tok

    def parse(self) -> OptTree:
        if self.peek().kind == "end":
            raise self.error("empty input", self.peek())
        tree = self.expression(0)
        if self.peek().kind != "end":
            tok = self.peek()
            raise self.unsupported(tok) if tok.text not in ")}" else self.error(f"unbalanced {tok.text!r}", tok)
        return tree

    def infix_power(self, tok: _Tok):
        """Binding power and label of ``tok`` in infix position, or None."""
        if tok.kind == "sym":
            if tok.text == "=":
                return _BP_EQ, "="
            if tok.text in "+-":
                return _BP_ADD, tok.text
            if tok.text in "*/":
                return _BP_MUL, tok.text
            return None
        if tok.kind == "cmd" and tok.text in _OPERATOR_COMMANDS:
            return _BP_MUL, _OPERATOR_COMMANDS[tok.text]
        return None

    def starts_operand(self, tok: _Tok) -> bool:
        if tok.kind in ("num", "ident"):
            return True
        if tok.kind == "sym":
            return tok.text in "({"
        return tok.kind == "cmd" and tok.text not in _OPERATOR_COMMANDS

    def expression(self, min_bp: int) -> OptTree:
        left = self.prefix()
        while True:
            tok = self.peek()
            op = self.infix_power(tok)
            if op is not None:
                bp, label = op
                if bp <= min_bp:
                    break
                self.advance()
                right = self.expression(bp)
                left = OptTree.node(label, [left, right])
                continue
            if self.starts_operand(tok):
                if _BP_IMPLICIT <= min_bp:
                    break
                right = self.expression(_BP_IMPLICIT)
                left = OptTree.node("*", [left, right])
                continue
            break
        return left

    def prefix(self) -> OptTree:
        tok = self.peek()
        if tok.kind == "sym" and tok.text in "+-":
            self.advance()
            operand = self.expression(_BP_UNARY)
            return operand if tok.text == "+" else OptTree.node("-", [operand])
        return self.power()

    def power(self) -> OptTree:
        base = self.primary()
        while self.peek().text in ("^", "_") and self.peek().kind == "sym":
            op = self.advance().text
            if op == "^":
                # right-associative: the exponent may carry its own postfix
                base = OptTree.node("^", [base, self.script_power()])
            else:
                base = OptTree.node("_", [base, self.script()])
        return base

    def script_power(self) -> OptTree:
        arg = self.script()
        if self.peek().kind == "sym" and self.peek().text == "^":
            self.advance()
            return OptTree.node("^", [arg, self.script_power()])
        return arg

    def script(self) -> OptTree:
        """Argument of ``^``/``_``: a braced group or a single atom."""
        tok = self.peek()
        if tok.kind == "sym" and tok.text == "{":
            return self.group()
        if tok.kind in ("num", "ident"):
            self.advance()
            return OptTree.leaf(tok.text)
        if tok.kind == "end":
            raise self.error("missing script argument", tok)
        return self.primary()

    def group(self) -> OptTree:
        open_tok = self.expect("{")
        if self.peek().text == "}":
            raise self.error("empty group", open_tok)
        inner = self.expression(0)
        tok = self.advance()
        if tok.text != "}" or tok.kind != "sym":
            raise self.error("unbalanced '{'", open_tok) if tok.kind == "end" else self.unsupported(tok)
        return inner

    def primary(self) -> OptTree:
        tok = self.advance()
        if tok.kind in ("num", "ident"):
            return OptTree.leaf(tok.text)
        if tok.kind == "end":
            raise self.error("unexpected end of input", tok)
        if tok.kind == "sym":
            if tok.text == "(":
                inner = self.expression(0)
                close = self.advance()
                if close.text != ")" or close.kind != "sym":
                    raise self.error("unbalanced '('", tok) if close.kind == "end" else self.unsupported(close)
                return inner
            if tok.text == "{":
                self.i -= 1
                return self.group()
            if tok.text in ")}":
                raise self.error(f"unbalanced {tok.text!r}", tok)
            raise self.unsupported(tok)
        name = tok.text[1:]
        if name == "frac":
            num = self.group()
            den = self.group()
            return OptTree.node("/", [num, den])
        if name == "sqrt":
            if self.peek().text == "[":
                raise self.unsupported(self.peek())
            return OptTree.node("sqrt", [self.group()])
        if name in LATEX_FUNCTIONS:
            limits = []
            while self.peek().kind == "sym" and self.peek().text in ("_", "^"):
                op = self.advance().text
                limits.append(OptTree.node(op, [self.script()]))
            # parenthesised arguments bind tighter than a following ^: \\sin(x)^2
            arg = self.primary() if self.peek().text == "(" else self.power()
            return OptTree.node(name, [*limits, arg])
        raise self.unsupported(tok)


def parse_latex_subset(src: str) -> OptTree:
    """Parse a small LaTeX subset into an operator tree.

    Supported: ``+ - * / = ^ _``, ``\\cdot``, ``\\times``, ``\\frac{}{}``,
    ``\\sqrt{}``, parentheses and braces, single-letter identifiers, decimal
    numbers, implicit multiplication and the functions ``\\sin \\cos \\log
    \\exp \\sum \\int``. Anything else raises :class:`UnsupportedConstruct`.
    """
    return _LatexParser(src).parse()


# ---------------------------------------------------------------------------
# corpus rows

@dataclass(frozen=True)
class FormulaRecord:
    formula_id: str
    post_id: str
    source_text: str
    context: str = ""


def _unescape(field: str) -> str:
    return re.sub(r"\\([\\tn])", lambda m: {"t": "\t", "n": "\n", "\\": "\\"}[m.group(1)], field)


def _escape(field: str) -> str:
    return field.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def read_corpus_tsv(lines: Iterable[str]) -> Iterator[FormulaRecord]:
    """Yield records from ``formula_id, post_id, opt_sexpr, context`` rows."""
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\r\n")
        if not line:
            continue
        fields = line.split("\t")
        if len(fields) == 3:
            fields.append("")
        if len(fields) != 4:
            raise ValueError(f"line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
        fid, pid, src, ctx = fields
        yield FormulaRecord(fid, pid, src, _unescape(ctx))


def format_corpus_row(rec: FormulaRecord) -> str:
    return "\t".join([rec.formula_id, rec.post_id, rec.source_text, _escape(rec.context)]) + "\n"


def parse_formula(src: str, syntax: str = "sexpr") -> OptTree:
    if syntax == "sexpr":
        return parse_opt_sexpr(src)
    if syntax == "latex":
        return parse_latex_subset(src)
    raise ValueError(f"unknown formula syntax {syntax!r}")
