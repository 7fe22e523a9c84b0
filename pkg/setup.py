"""Build script: compiles the optional Cython kernel core.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so a failed cythonize/compile only costs speed.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    # -ffp-contract=off keeps float results bit-identical to the numpy
    # fallback (no FMA fusion inside the accumulation loops).
    ext_modules = cythonize(
        [
            "src/rflab/_kernels/_core.pyx",
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
    for ext in ext_modules:
        ext.extra_compile_args = ["-O3", "-ffp-contract=off"]
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"warning: building without compiled kernels ({exc})", file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
