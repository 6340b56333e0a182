import os
import sys

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("OMBA_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
        import numpy as np
    except ImportError:
        print("Cython or numpy missing; building the pure-Python package only", file=sys.stderr)
    else:
        openmp = [] if sys.platform == "darwin" else ["-fopenmp"]
        ext_modules = cythonize(
            [
                Extension(
                    "omba._kernel",
                    ["src/omba/_kernel.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"] + openmp,
                    extra_link_args=openmp,
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
