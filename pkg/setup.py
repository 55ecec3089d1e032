"""Build shim for the optional compiled kernels.

The package is pure Python plus one small Cython extension for the hot
reduce/copy loops. If Cython or a C compiler is unavailable the build
falls through to the numpy fallback selected at import time.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    import numpy as np
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "ftdp._ckernels",
                ["src/ftdp/_ckernels.pyx"],
                include_dirs=[np.get_include()],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build environment dependent
    print(f"ftdp: building without compiled kernels ({exc})")

setup(ext_modules=ext_modules)
