import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# Cython extension for the hot kernels; the package falls back to the pure
# numpy implementation at import time if the build is unavailable.
setup(
    ext_modules=cythonize(
        [
            Extension(
                "shardmax._ckernels",
                sources=["src/shardmax/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    ),
)
