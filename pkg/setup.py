"""Build the compiled kernel extension; fall back to pure Python if unavailable.

The package is fully functional without the extension (bimatch._kernels_py
is selected at import time), so a failed compile only costs speed.
"""

from setuptools import setup
from setuptools.extension import Extension

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "bimatch._kernels",
                sources=["src/bimatch/_kernels.pyx"],
                # fp-contract off: FMA fusion would change bitwise results vs
                # the pure-Python summation-order oracle.
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    print("Cython not available; installing with the pure-Python kernel backend")

setup(ext_modules=ext_modules)
