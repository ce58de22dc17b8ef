"""Build script: compiles the optional Cython kernel extension.

The extension accelerates the hot per-step kernels (GRU gate math, Adam
updates, Huber elementwise).  If no C compiler is available the build
degrades gracefully and the package falls back to the pure-numpy kernels
at import time (see ha2g._kernels).
"""

import numpy
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """Build the extension if possible; warn instead of failing otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing / broken toolchain
            print(f"WARNING: skipping Cython kernels ({exc}); "
                  "pure-numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"WARNING: failed to build {ext.name} ({exc}); "
                  "pure-numpy fallback will be used")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    return cythonize(
        [
            Extension(
                "ha2g._kernels._fast",
                ["src/ha2g/_kernels/_fast.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-ffast-math"],
                extra_link_args=["-lmvec", "-lm"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )


setup(ext_modules=extensions(), cmdclass={"build_ext": optional_build_ext})
