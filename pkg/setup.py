import os

import numpy as np
from setuptools import Extension, setup

# The pure-Python kernels cover every code path, so a missing compiler or
# Cython only costs speed.
ext_modules = []
if os.environ.get("TINYSSL_NO_EXT", "") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [Extension("tinyssl._ckernels", ["src/tinyssl/_ckernels.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"])],
            language_level=3,
        )
    except ImportError:
        pass

setup(ext_modules=ext_modules)
