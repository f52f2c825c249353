"""Spectral diagnostics, rank audit of inverse tiles, and report aggregation.

The benchmark operators are singular (Neumann), so every spectral quantity is
computed on the orthogonal complement of the constant vector.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .partition import provided_rank_fraction
from .validation import ContractError, NumericalError

SPECTRUM_CAP = 2048
DEFAULT_EPS = (1e-3, 1e-6, 1e-9)

SPECTRUM_COLUMNS = ("method", "N", "frame", "kappa", "neg_count")
RANK_COLUMNS = ("S", "eps", "provided", "required_mean", "required_std")
SUMMARY_COLUMNS = ("method", "N", "iters_mean", "iters_std", "wall_ms_mean",
                   "iters_min", "iters_max", "n_frames", "failures")


def deflation_basis(N):
    """Orthonormal ``(N, N-1)`` basis of the complement of the constant vector.

    Columns 2..N of the Householder reflector that maps ``e_1`` to ``1/sqrt(N)``.
    """
    v = np.full(N, 1.0 / np.sqrt(N))
    v[0] -= 1.0
    v /= np.linalg.norm(v)
    H = np.eye(N) - 2.0 * np.outer(v, v)
    return H[:, 1:]


def _dense(A, cap):
    n = A.shape[0]
    if n > cap:
        raise ContractError(f"N={n} exceeds the dense cap {cap}; lower N or raise the cap")
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=np.float64)


def _dense_preconditioner(M, n):
    """Dense matrix of ``M`` given as an array, sparse matrix or applier."""
    if M is None:
        return np.eye(n)
    if callable(M) and not hasattr(M, "shape"):
        I = np.eye(n)
        return np.column_stack([np.asarray(M(I[:, j]), dtype=np.float64) for j in range(n)])
    return M.toarray() if sp.issparse(M) else np.asarray(M, dtype=np.float64)


def pseudo_inverse(A, cap=SPECTRUM_CAP, deflate=True):
    """Dense inverse of ``A`` on the complement of constants (``Q (Q^T A Q)^-1 Q^T``)."""
    Ad = _dense(A, cap)
    if not deflate:
        return np.linalg.inv(Ad)
    Q = deflation_basis(Ad.shape[0])
    return Q @ np.linalg.solve(Q.T @ Ad @ Q, Q.T)


@dataclass
class SpectrumReport:
    method: str
    N: int
    eigenvalues: np.ndarray = field(repr=False)
    kappa: float
    neg_count: int
    kappa_unpreconditioned: float
    frame: str | None = None

    @property
    def kappa_reduction(self):
        return self.kappa_unpreconditioned / self.kappa

    def row(self):
        return {"method": self.method, "N": self.N, "frame": self.frame or "",
                "kappa": self.kappa, "neg_count": self.neg_count}

    def to_dict(self):
        d = self.row()
        d.update(kappa_unpreconditioned=self.kappa_unpreconditioned,
                 kappa_reduction=self.kappa_reduction,
                 lambda_min=float(self.eigenvalues[0]), lambda_max=float(self.eigenvalues[-1]))
        return d


def _kappa(ev, neg_tol):
    pos = ev[ev > neg_tol]
    if pos.size == 0:
        return np.inf
    return float(pos[-1] / pos[0])


def precond_spectrum(A, M=None, cap=SPECTRUM_CAP, method="custom", frame=None, neg_rtol=1e-10,
                     deflate=True):
    """Eigenvalues of ``M A`` restricted to the complement of constants.

    With ``A_d = Q^T A Q = R R^T`` (Cholesky), ``M_d A_d`` is similar to the
    symmetric ``R^T M_d R``, so the spectrum is real even when ``M`` is
    indefinite. Eigenvalues below ``-neg_rtol * max|lambda|`` are counted as
    negative; kappa uses the positive part. ``deflate=False`` skips the
    projection, for nonsingular operators.
    """
    Ad = _dense(A, cap)
    n = Ad.shape[0]
    Q = deflation_basis(n) if deflate else np.eye(n)
    A_d = Q.T @ Ad @ Q
    A_d = 0.5 * (A_d + A_d.T)
    try:
        R = np.linalg.cholesky(A_d)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("deflated operator is not positive definite") from exc
    Md = _dense_preconditioner(M, n)
    M_d = Q.T @ (0.5 * (Md + Md.T)) @ Q
    ev = np.linalg.eigvalsh(R.T @ M_d @ R)
    ev_a = np.linalg.eigvalsh(A_d)
    tol = neg_rtol * np.abs(ev).max()
    neg = int(np.count_nonzero(ev < -tol))
    return SpectrumReport(method, n, ev, _kappa(ev, tol), neg, float(ev_a[-1] / ev_a[0]), frame)


# -- rank audit ---------------------------------------------------------------

def required_rank(sv, eps):
    """Smallest ``r`` with ``||X - X_r||_F / ||X||_F <= eps`` from singular values ``sv``."""
    sv = np.asarray(sv, dtype=np.float64)
    total = float(np.sum(sv**2))
    if total == 0.0:
        return 0
    # tail[r] = sum_{i >= r} sigma_i^2
    tail = np.concatenate([np.cumsum((sv**2)[::-1])[::-1], [0.0]])
    ok = np.sqrt(tail / total) <= eps
    return int(np.argmax(ok))


@dataclass
class RankAuditReport:
    L: int
    L_s: int
    eps: tuple
    spans: list
    provided: dict
    required_mean: dict  # (S, eps) -> mean fraction
    required_std: dict
    samples: dict = field(repr=False, default_factory=dict)  # (S, eps) -> list of fractions

    def rows(self):
        return [{"S": S, "eps": e, "provided": self.provided[S],
                 "required_mean": self.required_mean[(S, e)],
                 "required_std": self.required_std[(S, e)]}
                for S in self.spans for e in self.eps]

    def to_dict(self):
        return {"L": self.L, "L_s": self.L_s, "eps": list(self.eps), "rows": self.rows()}


def tile_singular_values(X, partition):
    """Singular values of every off-diagonal tile of the dense matrix ``X``."""
    L = partition.L
    out = []
    for t in partition.tiles:
        blk = X[t.row_start * L:(t.row_start + t.span) * L, t.col_start * L:(t.col_start + t.span) * L]
        out.append((t, sla.svdvals(blk)))
    return out


def rank_audit(operators, partition, eps=DEFAULT_EPS, L_s=32, cap=SPECTRUM_CAP, deflate=True):
    """Required truncated-SVD rank fraction of inverse tiles, grouped by span.

    ``operators`` is one operator or a list sharing ``partition``; fractions
    from every tile of every operator are pooled per span.
    """
    if not isinstance(operators, (list, tuple)):
        operators = [operators]
    eps = tuple(float(e) for e in eps)
    samples = defaultdict(list)
    for A in operators:
        if A.shape[0] != partition.N:
            raise ContractError("operator size does not match partition")
        X = pseudo_inverse(A, cap, deflate)
        for t, sv in tile_singular_values(X, partition):
            side = t.span * partition.L
            for e in eps:
                samples[(t.span, e)].append(required_rank(sv, e) / side)
    spans = sorted({int(S) for S in partition.spans})
    return RankAuditReport(
        L=partition.L, L_s=L_s, eps=eps, spans=spans,
        provided={S: provided_rank_fraction(S, partition.L, L_s) for S in spans},
        required_mean={k: float(np.mean(v)) for k, v in samples.items()},
        required_std={k: float(np.std(v)) for k, v in samples.items()},
        samples=dict(samples))


# -- aggregation --------------------------------------------------------------

def aggregate_reports(reports):
    """Per-(method, N) iteration statistics; std is the population std."""
    groups = defaultdict(list)
    for r in reports:
        rep = r if isinstance(r, dict) else r.to_dict()
        groups[(rep["method"], rep["N"])].append(rep)
    rows = []
    for (method, N), reps in sorted(groups.items(), key=lambda kv: (kv[0][1] or 0, kv[0][0])):
        it = np.array([r["iterations"] for r in reps], dtype=np.float64)
        rows.append({"method": method, "N": N,
                     "iters_mean": float(it.mean()), "iters_std": float(it.std()),
                     "wall_ms_mean": float(np.mean([r["wall_time"] for r in reps]) * 1e3),
                     "iters_min": int(it.min()), "iters_max": int(it.max()),
                     "n_frames": len(reps),
                     "failures": sum(1 for r in reps if not r["converged"])})
    return rows


def rows_to_csv(rows, columns, path=None):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def rows_to_json(rows, path=None):
    text = json.dumps(rows, indent=2, default=_json_default)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


__all__ = ["deflation_basis", "pseudo_inverse", "precond_spectrum", "SpectrumReport",
           "required_rank", "rank_audit", "RankAuditReport", "aggregate_reports",
           "rows_to_csv", "rows_to_json", "SPECTRUM_COLUMNS", "RANK_COLUMNS", "SUMMARY_COLUMNS"]
