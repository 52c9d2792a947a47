import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("ATLAS_SKIP_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "atlas.kernels._bm25_cy",
                    ["src/atlas/kernels/_bm25_cy.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # no Cython: the package falls back to the numpy kernel at import time
        ext_modules = []

setup(ext_modules=ext_modules)
