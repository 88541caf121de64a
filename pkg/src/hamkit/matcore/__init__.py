"""Numerical substrate: dense kernels, batch norm, seeded RNG, matrix files and the gradient tape."""
from .batchnorm import BatchNormCache, BatchNormState, batchnorm_backward, batchnorm_forward
from .kernels import (
    EPS,
    NumericError,
    ParameterError,
    ShapeError,
    as_matrix,
    check_finite,
    column_norms,
    column_softmax,
    cosine_similarity,
    l2_normalize_columns,
    matmul,
    relu,
    singular_values,
)
from .rng import ALGORITHM, derive_seed, make_rng
from .serialize import read_binary, read_csv, write_binary, write_csv

__all__ = [
    "EPS", "NumericError", "ParameterError", "ShapeError", "as_matrix", "check_finite",
    "column_norms", "column_softmax", "cosine_similarity", "l2_normalize_columns", "matmul",
    "relu", "singular_values", "BatchNormCache", "BatchNormState", "batchnorm_backward",
    "batchnorm_forward", "ALGORITHM", "derive_seed", "make_rng", "read_binary", "read_csv",
    "write_binary", "write_csv",
]
