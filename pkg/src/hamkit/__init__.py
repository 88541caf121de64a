"""hamkit: matrix-decomposition context blocks for numpy.

Submodules are imported on demand so that the CLI can configure BLAS
threading before numpy loads.
"""

__version__ = "0.1.0"
