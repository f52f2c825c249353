"""Input validation helpers shared by the estimators and kernels."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class ContractError(ValueError):
    """An operation was called with inputs that violate its contract."""


class ConfigError(ValueError):
    """Invalid sizes or hyperparameters."""


class NumericalError(RuntimeError):
    """Breakdown or divergence of an iterative method."""


def check_csr(A, square=True):
    """Validate and return ``A`` as a canonical float64 CSR matrix.

    Checks: nondecreasing row offsets ending at nnz, column indices in range and
    strictly increasing within each row.
    """
    if not sp.issparse(A):
        A = sp.csr_matrix(np.asarray(A, dtype=np.float64))
    A = A.tocsr()
    if A.dtype != np.float64:
        A = A.astype(np.float64)
    n_rows, n_cols = A.shape
    if square and n_rows != n_cols:
        raise ContractError(f"expected a square operator, got shape {A.shape}")
    indptr, indices = A.indptr, A.indices
    if len(indptr) != n_rows + 1 or indptr[0] != 0 or indptr[-1] != len(indices):
        raise ContractError("CSR row offsets inconsistent with nnz")
    if np.any(np.diff(indptr) < 0):
        raise ContractError("CSR row offsets must be nondecreasing")
    if len(indices) and (indices.min() < 0 or indices.max() >= n_cols):
        raise ContractError("CSR column index out of bounds")
    d = np.diff(indices)
    row_start = np.zeros(len(indices), dtype=bool)
    row_start[indptr[:-1][np.diff(indptr) > 0]] = True
    if len(d) and np.any((d <= 0) & ~row_start[1:]):
        raise ContractError("CSR column indices must be strictly increasing within each row")
    return A


def check_symmetric(A, rtol=0.0):
    diff = abs(A - A.T)
    bad = diff.max() if diff.nnz else 0.0
    scale = abs(A).max() if A.nnz else 1.0
    if bad > rtol * scale:
        raise ContractError(f"operator is not symmetric (max |A - A^T| = {bad:.3e})")
    return A


def check_positive_diagonal(A):
    d = np.asarray(A.diagonal(), dtype=np.float64)
    if np.any(d <= 0):
        raise ContractError(f"operator has {int(np.sum(d <= 0))} nonpositive diagonal entries")
    return d


def check_vector(x, n, name="x"):
    x = np.asarray(x)
    if x.shape[0] != n:
        raise ContractError(f"{name} has length {x.shape[0]}, expected {n}")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} has non-finite entries")
    return x
