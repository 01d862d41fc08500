import io

import numpy as np
import pytest

from formularank.encoder import (
    MASK,
    RESERVED_TOKENS,
    UNK,
    WILD,
    GraphBatch,
    NodeVocab,
    backward,
    build_vocab,
    embed_corpus,
    encode,
    forward,
    init_params,
    load_checkpoint,
    param_names,
    save_checkpoint,
)
from formularank.formula_ir import Edge, OpgGraph, OptTree, opt_to_opg, parse_opt_sexpr
from formularank.synthetic import unique_trees


def graph(src):
    return opt_to_opg(parse_opt_sexpr(src))


@pytest.fixture(scope="module")
def corpus():
    return [opt_to_opg(t) for t in unique_trees(60, seed=3)]


@pytest.fixture(scope="module")
def params(corpus):
    return init_params(build_vocab(corpus, 1), dim=16, n_layers=2, rng=0)


def permute(g: OpgGraph, perm) -> OpgGraph:
    """Same graph with node v stored at index perm[v] and edges shuffled."""
    labels = [None] * g.node_count
    for v, lab in enumerate(g.labels):
        labels[perm[v]] = lab
    edges = [Edge(perm[p], perm[c], pos) for p, c, pos in g.edges]
    edges.reverse()
    return OpgGraph(tuple(labels), tuple(edges), perm[g.root])


class TestVocab:
    def test_frequency_cut(self):
        v = build_vocab([graph("(+ a b)"), graph("(+ a c)")], min_frequency=2)
        assert v.labels == RESERVED_TOKENS + ("+", "a")
        assert v.index("b") == UNK and v.index("c") == UNK
        assert v.index("[MASK]") == MASK
        assert v.index("W12345") == WILD and v.index("W7") == WILD

    def test_min_frequency_one_keeps_all(self):
        v = build_vocab([graph("(+ a b)"), graph("(+ a c)")], min_frequency=1)
        assert set(v.labels[3:]) == {"+", "a", "b", "c"}

    def test_frequency_ordering(self):
        v = build_vocab([graph("(* b b)"), graph("(+ c b)"), graph("(+ a a)")], min_frequency=1)
        # b: 2 nodes, +: 2 nodes, then ties by bytes
        assert v.labels[3:] == ("+", "b", "*", "a", "c")

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab([], 1)


class TestInit:
    def test_reproducible(self, corpus):
        vocab = build_vocab(corpus, 1)
        a = init_params(vocab, dim=8, rng=5)
        b = init_params(vocab, dim=8, rng=5)
        assert all(np.array_equal(a.arrays[k], b.arrays[k]) for k in param_names(2))
        assert list(a.arrays) == param_names(2)

    def test_embedding_distribution(self):
        # 10^5 draws: 10,000 rows of width 10
        vocab = NodeVocab(RESERVED_TOKENS + tuple(f"x{i}" for i in range(9997)), 1)
        p = init_params(vocab, dim=10, n_layers=1, rng=1)
        e = p.arrays["embedding"].astype(np.float64).ravel()
        a = np.sqrt(3 / 10)
        assert np.abs(e).max() <= a
        sigma = a / np.sqrt(3)
        assert abs(e.mean()) < 3 * sigma / np.sqrt(e.size)
        assert e.var() == pytest.approx(sigma**2, rel=0.03)
        assert p.arrays["gin0.eps"][0] == 0

    def test_full_size_initializes(self, corpus):
        p = init_params(build_vocab(corpus, 1), dim=400, n_layers=2)
        assert p.dim == 400 and p.n_layers == 2

    def test_bad_sizes(self, corpus):
        with pytest.raises(ValueError):
            init_params(build_vocab(corpus, 1), dim=0)


class TestEncode:
    def test_permutation_invariance(self, params, corpus):
        rng = np.random.default_rng(0)
        for g in corpus[:20]:
            perm = rng.permutation(g.node_count)
            a = encode(g, params, "train")
            b = encode(permute(g, perm), params, "train")
            np.testing.assert_allclose(a.h, b.h, atol=1e-6)
            np.testing.assert_allclose(a.z, b.z, atol=1e-6)

    def test_isomorphic_relabelled_indices(self, params, example_graph):
        perm = list(range(example_graph.node_count))[::-1]
        np.testing.assert_allclose(encode(example_graph, params).h, encode(permute(example_graph, perm), params).h,
                                   atol=1e-6)

    def test_equal_opgs_embed_identically(self, params):
        # the tree is different as a string but hash-conses to the same graph
        t1 = parse_opt_sexpr("(+ (- a b) (- a b))")
        t2 = OptTree.node("+", [parse_opt_sexpr("(- a b)"), parse_opt_sexpr("(- a b)")])
        np.testing.assert_array_equal(encode(opt_to_opg(t1), params).h, encode(opt_to_opg(t2), params).h)

    def test_single_node_is_function_of_its_row(self, params):
        g1, g2 = opt_to_opg(OptTree.leaf("a")), opt_to_opg(OptTree.leaf("a"))
        h = encode(g1, params).h
        np.testing.assert_array_equal(h, encode(g2, params).h)
        # replay the layers by hand on the one row: no neighbours, so A x = 0
        x = params.arrays["embedding"][params.vocab.index("a")].astype(np.float64)
        for layer in range(params.n_layers):
            a = params.arrays
            r = np.maximum(x @ a[f"gin{layer}.W1"] + a[f"gin{layer}.b1"], 0)
            x = r @ a[f"gin{layer}.W2"] + a[f"gin{layer}.b2"]
        np.testing.assert_allclose(h, x, rtol=1e-6, atol=1e-7)

    def test_head_output_is_unit(self, params, corpus):
        _, z, _ = forward(params, GraphBatch(corpus, params.vocab), head=True)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1, atol=1e-9)

    def test_alternative_head_order(self, corpus):
        p = init_params(build_vocab(corpus, 1), dim=16, rng=0, head_order="normalize_relu")
        z = encode(corpus[0], p, "train").z
        assert np.all(z >= 0) and np.linalg.norm(z) == pytest.approx(1)

    def test_mode_checked(self, params, example_graph):
        with pytest.raises(ValueError):
            encode(example_graph, params, "eval")
        assert encode(example_graph, params).z is None

    def test_unknown_labels_are_finite(self, params):
        e = encode(graph("(zeta omega [MASK] W99)"), params, "train")
        assert np.isfinite(e.h).all() and np.isfinite(e.z).all()

    def test_locality_on_paths(self, params):
        n = 8
        path = lambda far: OpgGraph(  # noqa: E731
            ("f",) * (n - 1) + (far,), tuple(Edge(i, i + 1, 0) for i in range(n - 1)), 0
        )
        _, _, ca = forward(params, GraphBatch([path("a")], params.vocab))
        _, _, cb = forward(params, GraphBatch([path("b")], params.vocab))
        changed = np.flatnonzero(np.abs(ca["nodes"] - cb["nodes"]).max(axis=1) > 0)
        assert changed.tolist() == [n - 3, n - 2, n - 1]


class TestCorpusEmbedding:
    def test_rows_unit_and_duplicates_equal(self, params, corpus):
        S = embed_corpus(corpus + corpus[:1], params, batch_size=7)
        np.testing.assert_allclose(np.linalg.norm(S, axis=1), 1, atol=1e-9)
        np.testing.assert_array_equal(S[0], S[-1])
        assert S[0] @ S[0] == pytest.approx(1, abs=1e-6)

    def test_batching_does_not_change_rows(self, params, corpus):
        np.testing.assert_allclose(embed_corpus(corpus, params, 5), embed_corpus(corpus, params, 1000), atol=1e-12)

    def test_single_formula(self, params, example_graph):
        S = embed_corpus([example_graph], params)
        assert S.shape == (1, 16)


class TestCheckpoint:
    def test_round_trip(self, params, corpus):
        buf = io.BytesIO()
        save_checkpoint(params, buf)
        raw = buf.getvalue()
        assert raw[:6] == b"SSEMB1"
        back = load_checkpoint(io.BytesIO(raw))
        assert back.vocab == params.vocab and back.head_order == params.head_order
        for k in param_names(2):
            np.testing.assert_array_equal(back.arrays[k], params.arrays[k])
        np.testing.assert_array_equal(embed_corpus(corpus, back), embed_corpus(corpus, params))
        out = io.BytesIO()
        save_checkpoint(back, out)
        assert out.getvalue() == raw

    def test_unicode_labels(self):
        p = init_params(build_vocab([graph("(+ α β)")], 1), dim=4, n_layers=1)
        buf = io.BytesIO()
        save_checkpoint(p, buf)
        assert load_checkpoint(io.BytesIO(buf.getvalue())).vocab.labels == p.vocab.labels

    @pytest.mark.parametrize("cut", [3, 20, -1])
    def test_corrupt(self, params, cut):
        buf = io.BytesIO()
        save_checkpoint(params, buf)
        raw = buf.getvalue()
        bad = b"XXXXXX" + raw[6:] if cut == 3 else raw[:cut]
        with pytest.raises(ValueError):
            load_checkpoint(io.BytesIO(bad))


class TestBackward:
    def test_unused_embedding_rows_get_zero_gradient(self, params):
        batch = GraphBatch([graph("(+ a b)"), graph("(- a c)")], params.vocab)
        h, z, cache = forward(params, batch, head=True)
        grads = backward(params, batch, cache, dz=np.ones_like(z))
        used = set(batch.label_ids.tolist())
        for row in range(len(params.vocab)):
            if row not in used:
                assert not grads["embedding"][row].any()
        assert set(grads) == set(params.arrays)

    def test_linear_in_upstream_gradient(self, params, corpus):
        batch = GraphBatch(corpus[:6], params.vocab)
        h, _, cache = forward(params, batch)
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=h.shape), rng.normal(size=h.shape)
        ga = backward(params, batch, cache, dh=a)
        gb = backward(params, batch, cache, dh=b)
        gab = backward(params, batch, cache, dh=2 * a - b)
        for k in ga:
            np.testing.assert_allclose(gab[k], 2 * ga[k] - gb[k], atol=1e-9)

    def test_matches_directional_derivative(self, params, corpus):
        p = params.copy(np.float64)
        batch = GraphBatch(corpus[:6], p.vocab)
        rng = np.random.default_rng(1)
        h, _, cache = forward(p, batch)
        w = rng.normal(size=h.shape)
        grads = backward(p, batch, cache, dh=w)
        direction = {k: rng.normal(size=v.shape) for k, v in p.arrays.items()}
        analytic = sum(np.sum(grads[k] * direction[k]) for k in p.arrays)
        step = 1e-6

        def f(sign):
            q = p.copy()
            for k in q.arrays:
                q.arrays[k] = q.arrays[k] + sign * step * direction[k]
            return np.sum(forward(q, batch)[0] * w)

        numeric = (f(1) - f(-1)) / (2 * step)
        assert numeric == pytest.approx(analytic, rel=1e-5)
