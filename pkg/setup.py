"""Build script for the optional compiled WMMSE kernel.

The extension is optional: when Cython or a C compiler is unavailable the
package installs without it and falls back to the NumPy implementation.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("EQPRECODER_NO_EXT", "") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        extensions = [
            Extension(
                "eqprecoder._wmmse_ext",
                ["src/eqprecoder/_wmmse_ext.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
