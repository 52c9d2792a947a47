"""Okapi BM25 inverted index over bound phrases, used to shortlist candidate
utterance vertices for recognition."""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Sequence

import numpy as np

from .errors import AtlasError
from .kernels import accumulate_scores
from .phrases import Phrase


class ShortlistIndex:
    """Inverted index mapping tokens to the phrases containing them.

    Scores are classic Okapi BM25 with idf = ln(1 + (N - df + 0.5)/(df + 0.5))
    and unique-query-term semantics; per-posting term weights are precomputed
    so scoring reduces to one accumulation pass over posting lists.
    """

    def __init__(self, phrases: Sequence[Phrase], k1: float = 1.5, b: float = 0.75):
        if not phrases:
            raise AtlasError("cannot build a shortlist index over zero phrases")
        self.k1 = k1
        self.b = b
        self.num_docs = len(phrases)
        self.phrases = list(phrases)
        # padding order for underfull shortlists: global frequency rank
        self._freq_rank = sorted(range(self.num_docs),
                                 key=lambda i: (-self.phrases[i].frequency, i))

        doc_lens = np.array([len(p.tokens) for p in phrases], dtype=np.float64)
        avgdl = float(doc_lens.mean())

        vocab: dict[str, int] = {}
        postings: list[list[tuple[int, int]]] = []
        for doc_id, p in enumerate(phrases):
            for tok, tf in Counter(p.tokens).items():
                t = vocab.setdefault(tok, len(vocab))
                if t == len(postings):
                    postings.append([])
                postings[t].append((doc_id, tf))
        self._token_to_id = vocab

        n_tokens = len(vocab)
        counts = [len(pl) for pl in postings]
        self._indptr = np.zeros(n_tokens + 1, dtype=np.int64)
        np.cumsum(counts, out=self._indptr[1:])
        total = int(self._indptr[-1])
        self._post_doc = np.empty(total, dtype=np.int32)
        self._post_weight = np.empty(total, dtype=np.float64)
        self._idf = np.empty(n_tokens, dtype=np.float64)
        for t, plist in enumerate(postings):
            df = len(plist)
            self._idf[t] = np.log(1.0 + (self.num_docs - df + 0.5) / (df + 0.5))
            base = self._indptr[t]
            for off, (doc_id, tf) in enumerate(plist):
                norm = k1 * (1.0 - b + b * doc_lens[doc_id] / avgdl)
                self._post_doc[base + off] = doc_id
                self._post_weight[base + off] = tf * (k1 + 1.0) / (tf + norm)

    def scores(self, tokens: Iterable[str]) -> np.ndarray:
        """Dense BM25 scores of every phrase against the query tokens."""
        ids = sorted({self._token_to_id[t] for t in tokens if t in self._token_to_id})
        out = np.zeros(self.num_docs, dtype=np.float64)
        if ids:
            query = np.asarray(ids, dtype=np.int32)
            accumulate_scores(query, self._indptr, self._post_doc,
                              self._post_weight, self._idf, out)
        return out

    def shortlist(self, tokens: Iterable[str], k: int = 50) -> list[int]:
        """Top-k phrase ids by BM25, ties by lower id; padded with unmatched
        phrases in global frequency order when fewer than k score > 0."""
        k = min(k, self.num_docs)
        if k <= 0:
            return []
        scores = self.scores(tokens)
        hit = np.flatnonzero(scores > 0.0)
        ranked = sorted(hit.tolist(), key=lambda i: (-scores[i], i))[:k]
        if len(ranked) < k:
            chosen = set(ranked)
            for i in self._freq_rank:
                if i not in chosen:
                    ranked.append(i)
                    if len(ranked) == k:
                        break
        return ranked
