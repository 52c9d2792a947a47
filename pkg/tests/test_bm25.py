import math

import numpy as np
import pytest

from atlas.bm25 import ShortlistIndex
from atlas.kernels import KERNEL_IMPL
from atlas.kernels._bm25_py import accumulate_scores as py_accumulate
from atlas.phrases import Phrase


def make_phrases(token_lists):
    return [Phrase(phrase_id=i, tokens=tuple(t), frequency=100 - i)
            for i, t in enumerate(token_lists)]


def oracle_bm25(query, docs, k1=1.5, b=0.75):
    """Independent direct-formula scorer (no inverted index)."""
    n = len(docs)
    avgdl = sum(len(d) for d in docs) / n
    df = {}
    for d in docs:
        for t in set(d):
            df[t] = df.get(t, 0) + 1
    scores = []
    for d in docs:
        s = 0.0
        for t in set(query):
            tf = d.count(t)
            if tf == 0:
                continue
            idf = math.log(1 + (n - df[t] + 0.5) / (df[t] + 0.5))
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(d) / avgdl))
        scores.append(s)
    return scores


THREE_PHRASES = [("go", "to", "huangshan"), ("like", "tea"), ("want", "boyfriend")]


class TestScores:
    def test_hand_computed_three_phrase_index(self):
        # idf = ln(1 + 2.5/1.5), dl=3, avgdl=7/3: three matched terms
        phrases = make_phrases(THREE_PHRASES)
        index = ShortlistIndex(phrases)
        query = ["i", "go", "to", "huangshan", "tomorrow"]
        scores = index.scores(query)
        idf = math.log(1 + (3 - 1 + 0.5) / 1.5)
        norm = 1.5 * (1 - 0.75 + 0.75 * 3 / (7 / 3))
        expected = 3 * idf * 2.5 / (1 + norm)
        assert scores[0] == pytest.approx(expected, rel=1e-12)
        assert scores[1] == 0.0 and scores[2] == 0.0

    def test_matches_direct_formula_oracle(self):
        docs = [("a", "b", "c"), ("b", "c"), ("c", "d", "e", "f"), ("a",), ("e", "e", "f")]
        index = ShortlistIndex(make_phrases(docs))
        for query in (["a", "c"], ["e", "e", "f"], ["zz"], ["a", "b", "c", "d", "e", "f"]):
            np.testing.assert_allclose(index.scores(query), oracle_bm25(query, docs),
                                       rtol=1e-12, atol=1e-15)

    def test_verbatim_phrase_ranks_first(self):
        index = ShortlistIndex(make_phrases(THREE_PHRASES))
        assert index.shortlist(["she", "would", "like", "tea"], k=1) == [1]


class TestShortlist:
    def test_padding_by_frequency_rank(self):
        # no token overlap at all: ordering falls back to frequency rank
        phrases = [Phrase(0, ("a", "b"), 5), Phrase(1, ("c", "d"), 9), Phrase(2, ("e",), 7)]
        index = ShortlistIndex(phrases)
        assert index.shortlist(["zz", "qq"], k=3) == [1, 2, 0]

    def test_k_larger_than_corpus(self):
        index = ShortlistIndex(make_phrases(THREE_PHRASES))
        assert len(index.shortlist(["go"], k=50)) == 3

    def test_score_ties_broken_by_lower_id(self):
        phrases = make_phrases([("x", "y"), ("x", "z")])
        index = ShortlistIndex(phrases)
        assert index.shortlist(["x"], k=2) == [0, 1]

    def test_partial_match_then_padding(self):
        phrases = [Phrase(0, ("a", "b"), 1), Phrase(1, ("c", "d"), 9), Phrase(2, ("e",), 5)]
        index = ShortlistIndex(phrases)
        out = index.shortlist(["a"], k=3)
        assert out[0] == 0  # only scoring doc first
        assert out[1:] == [1, 2]  # then frequency-ranked padding


class TestKernelParity:
    def test_python_and_active_kernel_agree(self):
        rng = np.random.default_rng(0)
        docs = [tuple(rng.choice(list("abcdefgh"), size=rng.integers(1, 6)).tolist())
                for _ in range(40)]
        index = ShortlistIndex(make_phrases(docs))
        for _ in range(10):
            query = rng.choice(list("abcdefghij"), size=4).tolist()
            ids = sorted({index._token_to_id[t] for t in query if t in index._token_to_id})
            active = index.scores(query)
            manual = np.zeros(index.num_docs)
            if ids:
                py_accumulate(np.asarray(ids, dtype=np.int32), index._indptr,
                              index._post_doc, index._post_weight, index._idf, manual)
            np.testing.assert_allclose(active, manual, rtol=1e-13, atol=0)

    def test_kernel_impl_reported(self):
        assert KERNEL_IMPL in ("cython", "python")
