"""Build script for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile should not block installation. Build with
FRAMEPROMPT_REQUIRE_EXT=1 to turn a missing compiler/Cython into an error.
"""

import os

from setuptools import Extension, setup

required = os.environ.get("FRAMEPROMPT_REQUIRE_EXT") == "1"

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "frameprompt.kernels._fast",
                ["src/frameprompt/kernels/_fast.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception:
    if required:
        raise

setup(ext_modules=ext_modules)
