import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("NPD_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "npdenoise._kernels",
                    ["src/npdenoise/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # distances must round exactly like the numpy fallback
                    extra_compile_args=["-O2", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": 3},
        )
    except ImportError as exc:
        print(f"npdenoise: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
