"""Mixed-precision preconditioned conjugate gradient plus Jacobi / IC(0) baselines."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import norm as sparse_norm, spsolve_triangular

from .validation import ConfigError, ContractError, NumericalError, check_csr, check_positive_diagonal


@dataclass
class SolveConfig:
    rtol: float = 1e-8
    max_iters: int = 20000
    record_residuals: bool = False

    def __post_init__(self):
        if not self.rtol > 0:
            raise ConfigError(f"rtol must be positive, got {self.rtol}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class SolveReport:
    method: str
    iterations: int
    converged: bool
    residual_history: list
    wall_time: float
    frame_id: str | None = None
    N: int | None = None
    breakdown: bool = False
    breakdown_iter: int | None = None
    notes: dict = field(default_factory=dict)
    residual_vectors: list | None = field(default=None, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("residual_vectors")
        return d

    def to_json(self):
        return json.dumps(self.to_dict())


def pcg_solve(A, b, precond=None, cfg=None, x0=None, method=None, frame_id=None):
    """Solve ``A x = b`` by PCG.

    ``precond`` maps a residual to ``M r`` (any precision; the result is
    promoted to float64). All dot products, norms and step sizes are float64.
    The iteration count is the number of A-products taken before
    ``||r_k|| / ||r_0|| <= rtol``.
    """
    cfg = cfg or SolveConfig()
    A = check_csr(A)
    b = np.asarray(b, dtype=np.float64)
    n = A.shape[0]
    if b.shape != (n,):
        raise ContractError(f"b has shape {b.shape}, expected ({n},)")
    if precond is None:
        precond = _identity
    if method is None:
        method = getattr(precond, "method", "none" if precond is _identity else "custom")
    normA = sparse_norm(A)

    t0 = time.perf_counter()
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A @ x
    r0 = float(np.linalg.norm(r))
    hist = [1.0]
    vecs = [r.copy()] if cfg.record_residuals else None
    report = SolveReport(method, 0, r0 == 0.0, hist, 0.0, frame_id, n, residual_vectors=vecs)
    if r0 == 0.0:
        report.wall_time = time.perf_counter() - t0
        return x, report

    z = np.asarray(precond(r), dtype=np.float64)
    p = z.copy()
    rz = float(r @ z)
    for k in range(1, cfg.max_iters + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            if pAp < -1e-12 * float(p @ p) * normA or not np.isfinite(pAp) or pAp == 0.0:
                report.breakdown, report.breakdown_iter = True, k
                break
            pAp = abs(pAp)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rel = float(np.linalg.norm(r)) / r0
        hist.append(rel)
        report.iterations = k
        if vecs is not None:
            vecs.append(r.copy())
        if not np.isfinite(rel):
            report.breakdown, report.breakdown_iter = True, k
            break
        if rel <= cfg.rtol:
            report.converged = True
            break
        z = np.asarray(precond(r), dtype=np.float64)
        rz_new = float(r @ z)
        if rz_new == 0.0 or not np.isfinite(rz_new):
            report.breakdown, report.breakdown_iter = True, k
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    report.wall_time = time.perf_counter() - t0
    return x, report


def _identity(r):
    return r


class Applier:
    """Callable wrapper carrying a method tag."""

    def __init__(self, fn, method):
        self.fn = fn
        self.method = method

    def __call__(self, r):
        return self.fn(r)


def identity_applier():
    return Applier(_identity, "none")


def jacobi_applier(A):
    d = check_positive_diagonal(check_csr(A))
    dinv = 1.0 / d

    def fn(r):
        return r * dinv if np.ndim(r) == 1 else r * dinv[:, None]

    return Applier(fn, "jacobi")


def ic0_factorize(A, shift=1e-8):
    """Zero-fill incomplete Cholesky of ``A + alpha I`` with ``alpha = shift * max diag``.

    Returns the lower-triangular factor as CSR with the pattern of tril(A).
    """
    A = check_csr(A)
    n = A.shape[0]
    alpha = shift * float(A.diagonal().max())
    T = sp.tril(A, format="csr")
    T.sort_indices()
    indptr, indices, data = T.indptr, T.indices, T.data.copy()
    rows = [dict() for _ in range(n)]
    diag = np.zeros(n)
    for i in range(n):
        row = rows[i]
        for pos in range(indptr[i], indptr[i + 1]):
            k = indices[pos]
            a = data[pos]
            if k < i:
                rk = rows[k]
                s = a
                for j, lij in row.items():
                    lkj = rk.get(j)
                    if lkj is not None:
                        s -= lij * lkj
                row[k] = s / diag[k]
            else:
                s = a + alpha - sum(v * v for v in row.values())
                if not s > 0.0:
                    raise NumericalError(f"IC(0) failed: nonpositive pivot {s:.3e} at row {i}")
                diag[i] = np.sqrt(s)
        if diag[i] == 0.0:
            raise NumericalError(f"IC(0) failed: row {i} has no diagonal entry")
    for i in range(n):
        for pos in range(indptr[i], indptr[i + 1]):
            k = indices[pos]
            data[pos] = diag[i] if k == i else rows[i][k]
    Lf = sp.csr_matrix((data, indices.copy(), indptr.copy()), shape=(n, n))
    Lf.sort_indices()
    return Lf


def ic0_applier(L):
    Lt = L.T.tocsr()

    def fn(r):
        y = spsolve_triangular(L, r, lower=True)
        return spsolve_triangular(Lt, y, lower=False)

    return Applier(fn, "ic0")
