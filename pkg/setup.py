"""Builds the optional compiled kernel extension.

The package works without it (saga.kernels falls back to the numpy
reference backend), so the extension is marked optional: a missing
compiler or Cython must not fail the install.
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "saga.kernels._fastk",
                ["src/saga/kernels/_fastk.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
