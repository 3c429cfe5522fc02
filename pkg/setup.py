"""Build script for the optional compiled recurrence kernel.

The package works without the extension (a NumPy fallback is selected at
import time); building it makes the GRU time loop a few times faster.
"""

from setuptools import setup
from Cython.Build import cythonize

setup(
    ext_modules=cythonize(
        ["src/budbreak/kernels/_recurrent.pyx"],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    ),
)
