import io

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from formularank import ContextEmbedder, FormulaRecord, FormulaRetriever, StructuralEncoder
from formularank.semantic import write_vectors
from formularank.synthetic import training_corpus
from formularank.validation import check_graphs, check_ids, check_unit_rows

SMALL = dict(dim=16, min_frequency=1, epochs=3, batch_size=32, learning_rate=3e-3)


@pytest.fixture(scope="module")
def records():
    return training_corpus(120, seed=2)


@pytest.fixture(scope="module")
def fitted(records):
    return StructuralEncoder(**SMALL).fit(records)


class TestStructuralEncoder:
    def test_params_and_clone(self):
        est = StructuralEncoder(dim=8, epochs=1)
        assert est.get_params()["dim"] == 8
        twin = clone(est)
        assert twin.get_params() == est.get_params() and twin is not est
        est.set_params(learning_rate=0.5)
        assert est.learning_rate == 0.5

    def test_fit_transform(self, fitted, records):
        X = fitted.transform(records)
        assert X.shape == (120, 16)
        np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1, atol=1e-9)
        assert len(fitted.history_) == 3

    def test_inputs_may_be_strings_or_latex(self, fitted):
        a = fitted.transform(["(+ a b)"])
        b = StructuralEncoder.from_params(fitted.params_, syntax="latex").transform(["a+b"])
        np.testing.assert_array_equal(a, b)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            StructuralEncoder().transform(["a"])

    def test_rejects_single_formula(self, fitted):
        with pytest.raises(TypeError):
            fitted.transform("(+ a b)")

    def test_bad_probability(self, records):
        with pytest.raises(ValueError):
            StructuralEncoder(p1=2.0, **SMALL).fit(records)

    def test_checkpoint(self, fitted, records, tmp_path):
        path = tmp_path / "m.ckpt"
        StructuralEncoder(**SMALL).fit(records, checkpoint_path=path)
        loaded = StructuralEncoder.from_checkpoint(path)
        np.testing.assert_allclose(loaded.transform(records[:5]), fitted.transform(records[:5]), atol=1e-12)


class TestContextEmbedder:
    def test_fallback(self, records):
        X = ContextEmbedder(dim=64).fit().transform(records[:4])
        assert X.shape == (4, 64)
        np.testing.assert_allclose(np.linalg.norm(X, axis=1), 1)

    def test_import(self, tmp_path):
        path = tmp_path / "v.bin"
        write_vectors(path, ["f1", "f2"], np.array([[3.0, 4.0], [0.0, 2.0]]))
        emb = ContextEmbedder(dim=2, provider="import", vectors=path).fit()
        X = emb.transform(["f2", "missing", FormulaRecord("f1", "p", "a", "")])
        np.testing.assert_allclose(X, [[0, 1], [0, 0], [0.6, 0.8]])

    def test_import_needs_file(self):
        with pytest.raises(ValueError):
            ContextEmbedder(provider="import").fit()
        with pytest.raises(ValueError):
            ContextEmbedder(provider="remote").fit()


class TestRetriever:
    def test_search_finds_itself(self, fitted, records):
        r = FormulaRetriever(fitted, ContextEmbedder(dim=64).fit(), lam=0.5, stage1_k=50, final_n=10).fit(records)
        res = r.search(records[7])
        assert res[0].formula_id == records[7].formula_id
        assert res[0].s_final == pytest.approx(1.0, abs=1e-6)

    def test_predict_collects_errors(self, fitted, records):
        r = FormulaRetriever(fitted, lam=1.0, stage1_k=20, final_n=5).fit(records)
        bad = FormulaRecord("T.bad", "q", "(+ a", "")
        rows = r.predict([records[0], bad, records[1]])
        assert r.errors_.keys() == {"T.bad"}
        assert [row.rank for row in rows] == [1, 2, 3, 4, 5] * 2
        assert rows[0].post_id == records[0].post_id

    def test_fit_vectors(self):
        r = FormulaRetriever(lam=1.0, stage1_k=2, final_n=2).fit_vectors(["a", "b"], np.eye(2))
        assert r.index_.ids == ["a", "b"]

    def test_clone(self, fitted):
        r = FormulaRetriever(fitted, lam=0.3)
        assert clone(r).get_params()["lam"] == 0.3


class TestValidation:
    def test_helpers(self):
        assert len(check_graphs(["a", "(+ a b)"])) == 2
        with pytest.raises(ValueError):
            check_graphs([])
        with pytest.raises(TypeError):
            check_graphs([3])
        with pytest.raises(ValueError):
            check_ids(["a", "a"])
        check_unit_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(ValueError):
            check_unit_rows(np.array([[2.0, 0.0]]))
        with pytest.raises(ValueError):
            check_unit_rows(np.array([[np.nan, 0.0]]))


def test_write_vectors_accepts_file_objects():
    buf = io.BytesIO()
    write_vectors(buf, ["x"], np.ones((1, 3)))
    assert buf.getvalue().startswith(b"SSEMBVEC")
