"""Hot-loop kernels: compiled extension when built, numpy fallback otherwise.

Set ATLAS_FORCE_PY_KERNELS=1 to skip the compiled extension."""

import os

if os.environ.get("ATLAS_FORCE_PY_KERNELS"):
    from ._bm25_py import accumulate_scores

    KERNEL_IMPL = "python"
else:
    try:
        from ._bm25_cy import accumulate_scores  # type: ignore[attr-defined]

        KERNEL_IMPL = "cython"
    except ImportError:
        from ._bm25_py import accumulate_scores

        KERNEL_IMPL = "python"

__all__ = ["accumulate_scores", "KERNEL_IMPL"]
