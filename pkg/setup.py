import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; kernels fall back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("TASKFORGE_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "taskforge._kernels",
                ["src/taskforge/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no fast-math / contraction: kernels must match the numpy path bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
