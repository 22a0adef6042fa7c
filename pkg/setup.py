"""Build the optional compiled kernels.

The package works without them: ``kptrack.kernels`` falls back to numpy
when ``kptrack._kernels`` cannot be imported.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:  # pragma: no cover - build without cython
    pass
else:
    ext_modules = cythonize(
        [
            Extension(
                "kptrack._kernels",
                ["src/kptrack/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
