import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("IMGA_PURE_PYTHON", "0") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("imga._kernels", ["src/imga/_kernels.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"])],
            language_level=3,
        )

setup(ext_modules=ext_modules)
