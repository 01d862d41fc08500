"""Input coercion and checks shared by the estimators."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .formula_ir import FormulaRecord, OpgGraph, OptTree, opt_to_opg, parse_formula


def check_graph(x, syntax: str = "sexpr") -> OpgGraph:
    if isinstance(x, OpgGraph):
        return x
    if isinstance(x, OptTree):
        return opt_to_opg(x)
    if isinstance(x, FormulaRecord):
        x = x.source_text
    if isinstance(x, str):
        return opt_to_opg(parse_formula(x, syntax))
    raise TypeError(f"cannot interpret {type(x).__name__} as a formula")


def check_graphs(X: Iterable, syntax: str = "sexpr") -> list[OpgGraph]:
    """Coerce formulas (graphs, trees, records or source strings) to operator graphs."""
    if isinstance(X, (str, OpgGraph, OptTree, FormulaRecord)):
        raise TypeError("expected a sequence of formulas, got a single formula")
    graphs = [check_graph(x, syntax) for x in X]
    if not graphs:
        raise ValueError("empty input")
    return graphs


def check_texts(X: Iterable) -> list[str]:
    out = []
    for x in X:
        if isinstance(x, FormulaRecord):
            out.append(x.context)
        elif isinstance(x, str):
            out.append(x)
        else:
            raise TypeError(f"cannot interpret {type(x).__name__} as text")
    return out


def check_probability(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_unit_rows(M: np.ndarray, atol: float = 1e-6, allow_zero: bool = True) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("expected a 2-d array")
    if not np.all(np.isfinite(M)):
        raise ValueError("non-finite values")
    norms = np.linalg.norm(M, axis=1)
    ok = np.abs(norms - 1.0) <= atol
    if allow_zero:
        ok |= norms == 0
    if not np.all(ok):
        raise ValueError(f"rows are not unit-norm (worst norm {norms[~ok][0]:.6g})")
    return M


def check_ids(ids: Sequence[str]) -> list[str]:
    ids = list(ids)
    seen = set()
    for fid in ids:
        if fid in seen:
            raise ValueError(f"duplicate id {fid!r}")
        seen.add(fid)
    return ids
