"""Numpy fallback for the BM25 posting-list accumulation kernel."""

import numpy as np


def accumulate_scores(query_tokens, indptr, post_doc, post_weight, idf, out):
    for t in query_tokens:
        lo, hi = indptr[t], indptr[t + 1]
        if hi > lo:
            np.add.at(out, post_doc[lo:hi], idf[t] * post_weight[lo:hi])
