import hashlib
import io
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from formularank.semantic import (
    bucket,
    embed_text_fallback,
    embed_texts,
    extract_context,
    hash64,
    import_vectors,
    read_vectors,
    tokenize,
    write_vectors,
)


class TestExtractContext:
    def test_short_post_returned_whole(self):
        post = "word " * 100
        ctx = extract_context(post.strip(), (10, 14), "f1")
        assert ctx.text == post.strip() and ctx.formula_id == "f1"

    def test_long_post_window_contains_formula(self):
        post = "x" * 2500 + " $FORMULA$ " + "y" * 2489
        assert len(post) == 5000
        start = post.index("FORMULA")
        ctx = extract_context(post, (start, start + 7))
        assert len(ctx.text) == 1024
        assert "FORMULA" in ctx.text
        assert ctx.text[ctx.anchor] in "FORMULA"

    def test_window_clamps_to_edges(self):
        post = "abc " * 1000
        head = extract_context(post, (0, 3))
        tail = extract_context(post, (len(post) - 4, len(post) - 1))
        assert head.text.startswith("abc") and len(head.text) == 1024
        assert tail.text.endswith("abc") and len(tail.text) == 1024

    def test_empty_post(self):
        assert extract_context("", None).text == ""

    def test_markup_and_delimiters_removed(self):
        ctx = extract_context("<p>Solve  $x^2=1$\n\nfor \\(x\\)</p><b>now</b>")
        assert ctx.text == "Solve x^2=1 for x now"

    def test_span_outside_text(self):
        with pytest.raises(ValueError):
            extract_context("short", (3, 40))

    def test_token_unit(self):
        post = " ".join(f"w{i}" for i in range(3000))
        start = post.index("w1500 ")
        ctx = extract_context(post, (start, start + 5), unit="tokens", max_length=100)
        toks = ctx.text.split()
        assert len(toks) == 100 and "w1500" in toks

    @given(st.text(max_size=3000), st.integers(0, 3000), st.integers(1, 400))
    def test_window_bounds(self, post, at, limit):
        at = min(at, len(post))
        ctx = extract_context(post, (at, at), max_length=limit)
        assert len(ctx.text) <= limit
        if ctx.text:
            assert 0 <= ctx.anchor < len(ctx.text)


class TestFallback:
    def test_hash_is_fixed_blake2b(self):
        assert hash64("x") == int.from_bytes(hashlib.blake2b(b"x", digest_size=8).digest(), "little")
        idx, sign = bucket("x", 256)
        assert idx == hash64("x") % 256 and sign == (-1.0 if hash64("x") >= 2**63 else 1.0)

    def test_identical_texts(self):
        a = embed_text_fallback("limit of a sequence", 64)
        b = embed_text_fallback("limit of a sequence", 64)
        assert np.array_equal(a.v, b.v) and a.v @ b.v == pytest.approx(1.0)

    def test_bag_of_words(self):
        a = embed_text_fallback("prime divisor of an integer")
        b = embed_text_fallback("integer an of divisor prime")
        assert np.array_equal(a.v, b.v)

    def test_disjoint_tokens_are_orthogonal(self):
        left, right = "alpha beta gamma", "delta epsilon zeta"
        dim = 256
        buckets_l = {bucket(t, dim)[0] for t in tokenize(left)}
        buckets_r = {bucket(t, dim)[0] for t in tokenize(right)}
        assert not buckets_l & buckets_r, "fixture must be collision-free"
        assert embed_text_fallback(left, dim).v @ embed_text_fallback(right, dim).v == 0.0

    def test_sublinear_weights(self):
        dim = 1024
        v = embed_text_fallback("a a a b", dim).v
        ia, sa = bucket("a", dim)
        ib, sb = bucket("b", dim)
        assert ia != ib
        assert v[ia] / v[ib] == pytest.approx(sa * np.log(4) / (sb * np.log(2)))

    def test_empty_text_flagged(self):
        sv = embed_text_fallback("  ,, ")
        assert not sv.normalized and not sv.v.any()

    def test_tokenizer(self):
        assert tokenize("Hello, World_x 42!") == ["hello", "world", "x", "42"]

    def test_matrix_helper(self):
        M = embed_texts(["a b", "", "c"], 32)
        assert M.shape == (3, 32) and not M[1].any()


def _vector_file(ids, M):
    buf = io.BytesIO()
    write_vectors(buf, ids, M)
    return buf.getvalue()


class TestVectorFiles:
    def test_layout(self):
        raw = _vector_file(["ab"], np.array([[1.0, 2.0]]))
        assert raw[:8] == b"SSEMBVEC"
        assert struct.unpack_from("<IIQ", raw, 8) == (1, 2, 1)
        assert struct.unpack_from("<H", raw, 24) == (2,)
        assert raw[26:28] == b"ab"
        assert struct.unpack_from("<2f", raw, 28) == (1.0, 2.0)
        assert len(raw) == 36

    def test_import_three_vectors(self):
        rng = np.random.default_rng(0)
        raw = _vector_file(["a", "b", "c"], rng.normal(size=(3, 384)) * 5)
        vecs = import_vectors(io.BytesIO(raw), dim=384)
        assert len(vecs) == 3
        for sv in vecs.values():
            assert np.linalg.norm(sv.v) == pytest.approx(1.0) and sv.provider == "imported"

    def test_round_trip(self):
        M = np.random.default_rng(1).normal(size=(4, 5)).astype(np.float32)
        ids, back = read_vectors(io.BytesIO(_vector_file(["é", "b", "c", "d"], M)))
        assert ids == ["é", "b", "c", "d"] and np.array_equal(back, M)

    def test_duplicate_id(self):
        raw = _vector_file(["x", "dup", "dup"], np.ones((3, 2)))
        with pytest.raises(ValueError, match="dup"):
            import_vectors(io.BytesIO(raw))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            import_vectors(io.BytesIO(_vector_file(["x"], np.ones((1, 3)))), dim=384)

    @pytest.mark.parametrize("mutate", [
        lambda r: b"BADMAGIC" + r[8:],
        lambda r: r[:12],
        lambda r: r[:-1],
        lambda r: r + b"\0",
        lambda r: r[:8] + struct.pack("<I", 2) + r[12:],
    ])
    def test_corrupt(self, mutate):
        raw = _vector_file(["x", "y"], np.ones((2, 3)))
        with pytest.raises(ValueError, match="corrupt"):
            read_vectors(io.BytesIO(mutate(raw)))
