import os

import numpy as np
from setuptools import Extension, setup

# The compiled core is optional: when Cython or a compiler is missing the
# package installs without it and falls back to mfeig._pycore at import.
ext_modules = []
if os.environ.get("MFEIG_NO_EXTENSION") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "mfeig._core",
                    ["src/mfeig/_core.pyx"],
                    include_dirs=[np.get_include(), "src/mfeig"],
                    depends=["src/mfeig/_fastmath.h"],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
