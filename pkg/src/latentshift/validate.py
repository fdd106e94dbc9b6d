"""Small shared validation helpers for probability vectors and matrices."""

import numpy as np

from latentshift.errors import DataError


def check_simplex(vec, what, tol=1e-6):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1:
        raise DataError(f"{what} must be a vector")
    if (vec < -tol).any() or abs(vec.sum() - 1.0) > tol:
        raise DataError(f"{what} is not a probability vector: {vec.tolist()}")
    return vec


def check_row_stochastic(mat, what, tol=1e-6):
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise DataError(f"{what} must be a matrix")
    if (mat < -tol).any() or np.abs(mat.sum(axis=1) - 1.0).max() > tol:
        raise DataError(f"{what} rows must each sum to 1 with entries >= 0")
    return mat
