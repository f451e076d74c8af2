"""Build the optional Cython kernels.

The package works without them; ``dynseg._backend`` falls back to the
numpy implementation when the extension is missing.
"""

import os

import numpy as np
from setuptools import Extension, setup

extensions = []
if not os.environ.get("DYNSEG_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = cythonize(
            [
                Extension(
                    "dynseg._ckernels",
                    ["src/dynseg/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=extensions)
