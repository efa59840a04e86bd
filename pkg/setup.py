from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "spml_lab._ckern",
                ["src/spml_lab/_ckern.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    # No Cython at build time: pure-python kernels are used at runtime.
    extensions = []

setup(ext_modules=extensions)
