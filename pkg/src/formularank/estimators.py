"""scikit-learn style front ends: fit/transform encoders and a fit/search retriever."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .augmentation import AugmentConfig
from .encoder import ModelParams, embed_corpus, load_checkpoint
from .formula_ir import FormulaRecord
from .retrieval import (
    RunRow,
    ScoredResult,
    SearchConfig,
    VectorIndex,
    results_to_rows,
    search_vectors,
)
from .semantic import embed_text_fallback, extract_context, import_vectors
from .training import TrainConfig, train
from .validation import check_graphs, check_probability, check_texts

log = logging.getLogger(__name__)


class StructuralEncoder(TransformerMixin, BaseEstimator):
    """Contrastively trained GIN encoder; ``transform`` returns unit-norm embeddings."""

    def __init__(self, dim=400, n_layers=2, min_frequency=11, epochs=25, batch_size=2560,
                 learning_rate=1e-4, temperature=0.2, p1=0.3, p2=0.005, p3=0.002, mask_rate=0.01,
                 head_order="relu_normalize", random_state=0, syntax="sexpr"):
        self.dim = dim
        self.n_layers = n_layers
        self.min_frequency = min_frequency
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.temperature = temperature
        self.p1 = p1
        self.p2 = p2
        self.p3 = p3
        self.mask_rate = mask_rate
        self.head_order = head_order
        self.random_state = random_state
        self.syntax = syntax

    def augment_config(self) -> AugmentConfig:
        for name in ("p1", "p2", "p3", "mask_rate"):
            check_probability(name, getattr(self, name))
        return AugmentConfig(self.p1, self.p2, self.p3, self.mask_rate, self.random_state)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            temperature=self.temperature, seed=self.random_state, dim=self.dim,
            n_layers=self.n_layers, min_frequency=self.min_frequency, head_order=self.head_order,
        )

    def fit(self, X, y=None, checkpoint_path=None, log_path=None):
        graphs = check_graphs(X, self.syntax)
        result = train(graphs, self.augment_config(), self.train_config(),
                       checkpoint_path=checkpoint_path, log_path=log_path)
        self.params_ = result.params
        self.vocab_ = result.params.vocab
        self.history_ = result.history
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        return embed_corpus(check_graphs(X, self.syntax), self.params_)

    @classmethod
    def from_params(cls, params: ModelParams, **kwargs) -> StructuralEncoder:
        est = cls(dim=params.dim, n_layers=params.n_layers, min_frequency=params.vocab.min_frequency,
                  head_order=params.head_order, **kwargs)
        est.params_ = params
        est.vocab_ = params.vocab
        est.history_ = []
        return est

    @classmethod
    def from_checkpoint(cls, path, **kwargs) -> StructuralEncoder:
        return cls.from_params(load_checkpoint(path), **kwargs)


class ContextEmbedder(TransformerMixin, BaseEstimator):
    """Semantic vectors for formula contexts.

    ``provider="fallback"`` hashes the (truncated) context text;
    ``provider="import"`` looks formulas up by id in a precomputed vector file,
    returning zero rows for ids it does not know.
    """

    def __init__(self, dim=256, provider="fallback", vectors=None, max_length=1024, unit="chars"):
        self.dim = dim
        self.provider = provider
        self.vectors = vectors
        self.max_length = max_length
        self.unit = unit

    def fit(self, X=None, y=None):
        if self.provider == "import":
            if self.vectors is None:
                raise ValueError("provider='import' needs a vector file")
            self.vectors_ = (
                self.vectors if isinstance(self.vectors, dict) else import_vectors(self.vectors, self.dim)
            )
        elif self.provider == "fallback":
            self.vectors_ = {}
        else:
            raise ValueError(f"unknown provider {self.provider!r}")
        return self

    def transform(self, X):
        check_is_fitted(self, "vectors_")
        X = list(X)
        out = np.zeros((len(X), self.dim))
        if self.provider == "import":
            for i, x in enumerate(X):
                fid = x.formula_id if isinstance(x, FormulaRecord) else x
                sv = self.vectors_.get(fid)
                if sv is not None:
                    out[i] = sv.v
            return out
        for i, text in enumerate(check_texts(X)):
            ctx = extract_context(text, max_length=self.max_length, unit=self.unit)
            out[i] = embed_text_fallback(ctx.text, self.dim).v
        return out


class FormulaRetriever(BaseEstimator):
    """Two-stage formula search over a fitted structural and (optional) semantic encoder."""

    def __init__(self, structural=None, semantic=None, lam=0.5, stage1_k=500_000, final_n=1000,
                 run_tag="formularank"):
        self.structural = structural
        self.semantic = semantic
        self.lam = lam
        self.stage1_k = stage1_k
        self.final_n = final_n
        self.run_tag = run_tag

    def search_config(self) -> SearchConfig:
        return SearchConfig(self.lam, self.stage1_k, self.final_n)

    def fit(self, X, y=None):
        """Index ``X``, a sequence of :class:`FormulaRecord`."""
        records = list(X)
        if self.structural is None:
            raise ValueError("a fitted structural encoder is required")
        S = self.structural.transform(records)
        T = self.semantic.transform(records) if self.semantic is not None else None
        self.index_ = VectorIndex([r.formula_id for r in records], S, T, [r.post_id for r in records])
        return self

    def fit_vectors(self, ids, structural, semantic=None, post_ids=None):
        """Index precomputed vectors instead of encoding records."""
        self.index_ = VectorIndex(ids, structural, semantic, post_ids)
        return self

    def _embed_query(self, query: FormulaRecord):
        q_struct = self.structural.transform([query])[0]
        q_sem = self.semantic.transform([query])[0] if self.semantic is not None else None
        return q_struct, q_sem

    def search(self, query: FormulaRecord) -> list[ScoredResult]:
        check_is_fitted(self, "index_")
        q_struct, q_sem = self._embed_query(query)
        return search_vectors(q_struct, q_sem, self.index_, self.search_config())

    def batch_search(self, queries) -> list[RunRow]:
        """Run every query; per-topic failures land in ``errors_`` instead of raising."""
        check_is_fitted(self, "index_")
        cfg = self.search_config()
        rows: list[RunRow] = []
        self.errors_ = {}
        for q in queries:
            try:
                q_struct, q_sem = self._embed_query(q)
                results = search_vectors(q_struct, q_sem, self.index_, cfg)
            except (ValueError, TypeError) as exc:
                log.error("topic %s failed: %s", q.formula_id, exc)
                self.errors_[q.formula_id] = str(exc)
                continue
            rows += results_to_rows(q.formula_id, results, self.index_, self.run_tag)
        return rows

    predict = batch_search
