"""Dense matrix kernels shared by the solvers, the block and the analyzers.

Matrices are plain ``numpy`` arrays. Every kernel also accepts a stack of
matrices (leading batch axes) and treats the last two axes as rows x cols.
"""
from __future__ import annotations

import numpy as np

EPS = 1e-8

__all__ = [
    "EPS",
    "ShapeError",
    "ParameterError",
    "NumericError",
    "as_matrix",
    "check_finite",
    "matmul",
    "column_softmax",
    "column_norms",
    "l2_normalize_columns",
    "cosine_similarity",
    "relu",
    "singular_values",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ParameterError(ValueError):
    """A scalar parameter is outside its admissible range."""


class NumericError(ArithmeticError):
    """A numerical procedure failed (non-finite values, no convergence, ...)."""


def as_matrix(a, dtype=np.float64) -> np.ndarray:
    m = np.asarray(a, dtype=dtype)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim < 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def column_softmax(m: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Softmax over each column (axis -2) of ``m / temperature``."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    z = m / temperature
    z = z - z.max(axis=-2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-2, keepdims=True)


def column_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt((m * m).sum(axis=-2, keepdims=True))


def l2_normalize_columns(m: np.ndarray) -> np.ndarray:
    # norms below EPS are clamped to EPS, so zero columns stay zero and unit columns stay exact
    return m / np.maximum(column_norms(m), EPS)


def cosine_similarity(d: np.ndarray, x: np.ndarray) -> np.ndarray:
    """r x n matrix of cosines between the columns of ``d`` and of ``x``."""
    if d.shape[-2] != x.shape[-2]:
        raise ShapeError(f"cosine_similarity: {d.shape} vs {x.shape}")
    dn = l2_normalize_columns(d)
    xn = l2_normalize_columns(x)
    return np.swapaxes(dn, -1, -2) @ xn


def relu(m: np.ndarray) -> np.ndarray:
    return np.maximum(m, 0.0)


def singular_values(m: np.ndarray, tol: float = 1e-10, max_sweeps: int = 100) -> np.ndarray:
    """Singular values in descending order via one-sided Jacobi rotations.

    Works on the orientation with fewer columns; each sweep orthogonalizes
    every column pair. Raises :class:`NumericError` if ``max_sweeps`` sweeps
    do not bring all pairwise column cosines below ``tol``.
    """
    a = np.array(as_matrix(m), dtype=np.float64, copy=True)
    if a.shape[0] < a.shape[1]:
        a = a.T.copy()
    ncols = a.shape[1]
    if ncols == 0:
        return np.zeros(0)
    for sweep in range(1, max_sweeps + 1):
        rotated = False
        for p in range(ncols - 1):
            for q in range(p + 1, ncols):
                ap, aq = a[:, p], a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                a[:, p] = new_p
        if not rotated:
            sigma = np.sqrt((a * a).sum(axis=0))
            return np.sort(sigma)[::-1]
    raise NumericError(f"one-sided Jacobi did not converge after {max_sweeps} sweeps")
