"""Build the optional Cython kernels.

Run ``python setup.py build_ext --inplace`` or ``pip install -e .`` to compile.
If Cython or a C compiler is unavailable, the package installs without the
extension and falls back to the pure-Python kernels at import time.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("TADCONF_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        extensions = [
            Extension(
                "tadconf._kernels._ext",
                ["src/tadconf/_kernels/_ext.pyx"],
                include_dirs=[np.get_include()],
                # exact IEEE arithmetic: the kernels must match the pure-Python path bit for bit
                extra_compile_args=["-O2", "-ffp-contract=off", "-fno-fast-math"],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": 3,
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
