"""Build script: compiles the native training kernel when Cython and a C
toolchain are available, and falls back to the pure-NumPy backend otherwise."""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if possible; the package works without it."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: skipping native extension build ({exc})", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(
                f"warning: could not build {ext.name}; the pure backend will be used ({exc})",
                file=sys.stderr,
            )


def make_extensions():
    import os

    if not os.path.exists("src/prefdist/backends/_native.pyx"):
        return []
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError as exc:
        print(f"warning: native extension not built ({exc})", file=sys.stderr)
        return []
    return cythonize(
        [
            Extension(
                "prefdist.backends._native",
                ["src/prefdist/backends/_native.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )


setup(ext_modules=make_extensions(), cmdclass={"build_ext": OptionalBuildExt})
