"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so a failed native build must not break the
install.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("SONOMIM_SKIP_NATIVE") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "sonomim.kernels._native",
            ["src/sonomim/kernels/_native.pyx"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3", "-fopenmp"],
            extra_link_args=["-fopenmp"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
