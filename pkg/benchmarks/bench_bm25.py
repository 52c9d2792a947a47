"""Compare the compiled BM25 accumulation kernel against the numpy fallback.

Usage: python benchmarks/bench_bm25.py [--phrases 50000] [--queries 2000]
"""

import argparse
import time

import numpy as np

from atlas.bm25 import ShortlistIndex
from atlas.phrases import Phrase


def synthetic_index(n_phrases: int, vocab: int, rng) -> ShortlistIndex:
    phrases = []
    for i in range(n_phrases):
        length = int(rng.integers(2, 6))
        tokens = tuple(f"w{t}" for t in rng.zipf(1.3, size=length) % vocab)
        phrases.append(Phrase(phrase_id=i, tokens=tokens, frequency=n_phrases - i))
    return ShortlistIndex(phrases)


def bench(kernel, index: ShortlistIndex, queries, repeats: int = 3) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        for q in queries:
            out = np.zeros(index.num_docs)
            kernel(q, index._indptr, index._post_doc, index._post_weight,
                   index._idf, out)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--phrases", type=int, default=50_000)
    parser.add_argument("--queries", type=int, default=2_000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    from atlas.kernels import KERNEL_IMPL
    from atlas.kernels._bm25_py import accumulate_scores as py_kernel

    rng = np.random.default_rng(args.seed)
    print(f"building index: {args.phrases} phrases ...")
    index = synthetic_index(args.phrases, vocab=3_000, rng=rng)
    queries = []
    for _ in range(args.queries):
        toks = [f"w{t}" for t in rng.zipf(1.3, size=6) % 3_000]
        ids = sorted({index._token_to_id[t] for t in toks if t in index._token_to_id})
        queries.append(np.asarray(ids, dtype=np.int32))

    t_py = bench(py_kernel, index, queries)
    print(f"numpy fallback : {t_py:.3f}s  ({args.queries / t_py:,.0f} queries/s)")

    try:
        from atlas.kernels._bm25_cy import accumulate_scores as cy_kernel
    except ImportError:
        print("compiled kernel not built (pip install -e . builds it); active "
              f"impl is {KERNEL_IMPL!r}")
        return
    # parity check before timing
    for q in queries[:20]:
        a = np.zeros(index.num_docs)
        b = np.zeros(index.num_docs)
        py_kernel(q, index._indptr, index._post_doc, index._post_weight, index._idf, a)
        cy_kernel(q, index._indptr, index._post_doc, index._post_weight, index._idf, b)
        np.testing.assert_allclose(a, b, rtol=1e-13)
    t_cy = bench(cy_kernel, index, queries)
    print(f"cython kernel  : {t_cy:.3f}s  ({args.queries / t_cy:,.0f} queries/s)")
    print(f"speedup        : {t_py / t_cy:.2f}x  (active impl: {KERNEL_IMPL})")


if __name__ == "__main__":
    main()
