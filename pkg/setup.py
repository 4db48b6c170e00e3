"""Build the optional Cython propagation kernel.

The extension is marked optional: if Cython or a C compiler is missing the
package still installs and falls back to the numpy implementation.
"""
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "hgac._kernels_cy",
                ["src/hgac/_kernels_cy.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
