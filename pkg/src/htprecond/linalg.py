"""Dense/sparse kernels, small eigen/SVD routines and keyed random streams."""

from __future__ import annotations

import zlib
from contextlib import contextmanager
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .validation import ContractError, check_csr

DENSE_CAP = 4096

_PRECISIONS = {"single": np.float32, "double": np.float64}


def dtype_for(precision):
    try:
        return _PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected 'single' or 'double'") from None


def spmv(A, x):
    """Sparse mat-vec ``y = A @ x`` accumulated in double precision.

    ``x`` may be a vector or an ``(n_cols, k)`` block of column vectors.
    """
    x = np.asarray(x)
    if x.shape[0] != A.shape[1]:
        raise ContractError(f"spmv: x has {x.shape[0]} rows, A has {A.shape[1]} columns")
    return A.astype(np.float64, copy=False) @ x.astype(np.float64, copy=False)


class FlopCounter:
    """Counts scalar multiplies issued through :func:`batched_gemm`."""

    def __init__(self):
        self.multiplies = 0
        self.calls = 0

    def add(self, batch, m, k, n):
        self.multiplies += batch * m * k * n
        self.calls += 1


_active_counters: list[FlopCounter] = []


@contextmanager
def count_flops():
    counter = FlopCounter()
    _active_counters.append(counter)
    try:
        yield counter
    finally:
        _active_counters.remove(counter)


def record_multiplies(n):
    for c in _active_counters:
        c.multiplies += int(n)


def batched_gemm(M, X, trans_a=False, trans_b=False, accumulate="single", out=None):
    """Per-element product ``op(M[i]) @ op(X[i])`` over a uniform batch.

    ``M`` and ``X`` are 3-D arrays (or sequences of equally shaped 2-D arrays).
    With ``accumulate="double"`` each product is formed in float64 and cast back
    to the input precision.
    """
    M = _as_batch(M, "M")
    X = _as_batch(X, "X")
    if M.shape[0] != X.shape[0]:
        raise ContractError(f"batched_gemm: batch sizes differ ({M.shape[0]} vs {X.shape[0]})")
    A = M.transpose(0, 2, 1) if trans_a else M
    B = X.transpose(0, 2, 1) if trans_b else X
    if A.shape[2] != B.shape[1]:
        raise ContractError(f"batched_gemm: inner dimensions differ ({A.shape} x {B.shape})")
    for c in _active_counters:
        c.add(A.shape[0], A.shape[1], A.shape[2], B.shape[2])
    if accumulate == "double":
        res = np.matmul(A.astype(np.float64), B.astype(np.float64))
        if out is None:
            return res.astype(np.result_type(M.dtype, X.dtype))
        out[...] = res
        return out
    if accumulate != "single":
        raise ValueError(f"accumulate must be 'single' or 'double', got {accumulate!r}")
    return np.matmul(A, B, out=out)


def _as_batch(T, name):
    if isinstance(T, np.ndarray):
        if T.ndim != 3:
            raise ContractError(f"batched_gemm: {name} must be 3-D, got shape {T.shape}")
        return T
    shapes = {np.shape(t) for t in T}
    if len(shapes) != 1:
        raise ContractError(f"batched_gemm: nonuniform shapes in {name}: {sorted(shapes)}")
    return np.stack([np.asarray(t) for t in T])


def sym_eig(A, cap=DENSE_CAP):
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ContractError(f"sym_eig: expected a square matrix, got shape {A.shape}")
    if A.shape[0] > cap:
        raise ContractError(f"sym_eig: n={A.shape[0]} exceeds dense cap {cap}")
    scale = np.linalg.norm(A)
    if scale > 0 and np.linalg.norm(A - A.T) > 1e-12 * scale:
        raise ContractError("sym_eig: input is not symmetric")
    w, V = np.linalg.eigh(A)
    return w, V


def singular_values(B):
    """Singular values of a dense block, in descending order."""
    B = np.asarray(B, dtype=np.float64)
    if not np.all(np.isfinite(B)):
        raise ContractError("singular_values: non-finite entries")
    if B.size == 0:
        return np.zeros(0)
    return np.linalg.svd(B, compute_uv=False)


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, frame, purpose, counter)``.

    Streams with distinct keys are statistically independent, and a given key
    yields the same draws regardless of what other streams were consumed.
    """

    seed: int
    frame: int = 0
    purpose: str = "default"
    counter: int = 0

    def generator(self):
        key = [self.seed & 0xFFFFFFFFFFFFFFFF, self.frame, zlib.crc32(self.purpose.encode()), self.counter]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))

    def child(self, purpose=None, frame=None, counter=None):
        return replace(
            self,
            purpose=self.purpose if purpose is None else purpose,
            frame=self.frame if frame is None else frame,
            counter=self.counter if counter is None else counter,
        )

    def advance(self, n=1):
        return replace(self, counter=self.counter + n)


def sample_normal(stream, n):
    """``n`` i.i.d. standard normal draws, deterministic per stream key.

    ``n`` may be an int or a shape tuple.
    """
    return stream.generator().standard_normal(n)


def _part1by1(v):
    v = np.asarray(v, dtype=np.uint64) & np.uint64(0xFFFF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x00FF00FF)
    v = (v | (v << np.uint64(4))) & np.uint64(0x0F0F0F0F)
    v = (v | (v << np.uint64(2))) & np.uint64(0x33333333)
    v = (v | (v << np.uint64(1))) & np.uint64(0x55555555)
    return v


def morton_encode(x, y):
    """Interleave the bits of ``x`` (even positions) and ``y`` (odd positions).

    Works elementwise on arrays; coordinates must be below 2**16.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if np.any(x < 0) or np.any(y < 0) or np.any(x >= 1 << 16) or np.any(y >= 1 << 16):
        raise ContractError("morton_encode: coordinates must lie in [0, 2**16)")
    code = _part1by1(x) | (_part1by1(y) << np.uint64(1))
    return int(code) if code.ndim == 0 else code


def csr_from_arrays(n, row_offsets, col_indices, values):
    A = sp.csr_matrix((np.asarray(values, dtype=np.float64),
                       np.asarray(col_indices, dtype=np.int64),
                       np.asarray(row_offsets, dtype=np.int64)), shape=(n, n))
    return check_csr(A)
