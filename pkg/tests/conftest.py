from pathlib import Path

import pytest

from formularank.formula_ir import opt_to_opg, parse_opt_sexpr

EXAMPLE = "(= (+ (/ 1 (- a b)) (^ (- a b) 2)) 1)"
DESK = Path(__file__).resolve().parents[1] / "src" / "formularank" / "data" / "desk"
GOLDEN = Path(__file__).resolve().parent / "golden"


@pytest.fixture
def example_tree():
    return parse_opt_sexpr(EXAMPLE)


@pytest.fixture
def example_graph():
    return opt_to_opg(parse_opt_sexpr(EXAMPLE))


@pytest.fixture(scope="session")
def desk_dir():
    return DESK


@pytest.fixture(scope="session")
def desk_pipeline(tmp_path_factory):
    from pipeline import run_desk_pipeline

    return run_desk_pipeline(tmp_path_factory.mktemp("desk"))
