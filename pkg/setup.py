import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

ext = Extension(
    "cddpe.backend._kernels",
    sources=["src/cddpe/backend/_kernels.pyx"],
    include_dirs=[numpy.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    # -ffp-contract=off keeps float32 results bit-identical to the NumPy path
    extra_compile_args=["-O3", "-ffp-contract=off"],
)

setup(ext_modules=cythonize([ext], language_level=3))
