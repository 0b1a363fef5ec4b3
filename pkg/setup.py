"""Build the optional compiled kernels.

A missing compiler or Cython install is not fatal: the package falls back
to the pure-Python kernels at import time.
"""
import os

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("PELLETFLOW_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("pelletflow._ckernels", ["src/pelletflow/_ckernels.pyx"],
                       extra_compile_args=["-O3"])],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
