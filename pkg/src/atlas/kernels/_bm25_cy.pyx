# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled posting-list accumulation for BM25 scoring."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def accumulate_scores(
    cnp.int32_t[::1] query_tokens,
    cnp.int64_t[::1] indptr,
    cnp.int32_t[::1] post_doc,
    cnp.float64_t[::1] post_weight,
    cnp.float64_t[::1] idf,
    cnp.float64_t[::1] out,
):
    """out[doc] += idf[t] * post_weight[posting] over every posting of every
    query token. `out` must be zeroed by the caller."""
    cdef Py_ssize_t qi, s
    cdef cnp.int32_t t
    cdef cnp.float64_t w
    for qi in range(query_tokens.shape[0]):
        t = query_tokens[qi]
        w = idf[t]
        for s in range(indptr[t], indptr[t + 1]):
            out[post_doc[s]] += w * post_weight[s]
