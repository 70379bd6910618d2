"""Build script: compiles the optional Cython convolution kernels.

The extension is best-effort. If Cython or a C compiler is missing, the
package installs anyway and falls back to the pure-numpy kernels at import
time (see voxpar.kernels).
"""

import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """build_ext that downgrades compilation failures to a warning."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing entirely
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            f"WARNING: building voxpar.kernels._hot failed ({exc!r}); "
            "falling back to the pure-numpy kernels.",
            file=sys.stderr,
        )


def make_ext_modules():
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError as exc:
        print(f"WARNING: {exc!r}; skipping compiled kernels.", file=sys.stderr)
        return []
    ext = Extension(
        "voxpar.kernels._hot",
        ["src/voxpar/kernels/_hot.pyx"],
        include_dirs=[np.get_include()],
        # -ffp-contract=off: no FMA fusion, so the compiled kernels round
        # exactly like the numpy fallback (same accumulation order).
        extra_compile_args=["-O3", "-ffp-contract=off"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )


setup(
    ext_modules=make_ext_modules(),
    cmdclass={"build_ext": optional_build_ext},
)
