"""Build the optional compiled SDE kernel; the package works without it."""
import os
import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # noqa: BLE001
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        sys.stderr.write(f"warning: compiled kernel not built ({exc}); "
                         "falling back to the NumPy implementation\n")


def extensions():
    if os.environ.get("OPTOMECH_NO_EXT"):
        return []
    try:
        import numpy  # noqa: F401
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension
    omp = [] if sys.platform == "darwin" else ["-fopenmp"]
    ext = Extension("optomech._kernels", ["src/optomech/_kernels.pyx"],
                    extra_compile_args=["-O3", *omp], extra_link_args=omp)
    return cythonize([ext], compiler_directives={"language_level": 3}, quiet=True)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
