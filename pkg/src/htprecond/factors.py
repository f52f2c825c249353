"""Packed hierarchical factor tensor and its matrix-free apply.

The preconditioner is

    M = blockdiag_k(F_k F_k^T)
        + sum_m  Ut_{R_m} B_m Vt_{C_m}^T  (+ transpose)
        + diag(gate) diag(A)^{-1}

where ``Ut_{R_m}`` stacks the row bridges of the leaves in tile m's row range
and ``Vt_{C_m}`` the column bridges of its column range. ``apply`` evaluates
``M @ r`` without forming M: restriction through the bridges, strip sums over
tile ranges, coarse coupling through ``B_m`` (and ``B_m^T`` for the mirrored
tile), and prolongation back to leaf resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import DENSE_CAP, RngStream, batched_gemm, dtype_for, sample_normal
from .partition import HPartition, packed_width
from .validation import ContractError


@dataclass
class FactorTensor:
    partition: HPartition
    L_s: int
    data: np.ndarray
    shift: float | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        P = packed_width(self.partition, self.L_s)
        if self.data.ndim != 1 or self.data.shape[0] != P:
            raise ContractError(f"factor data has shape {self.data.shape}, expected ({P},)")

    @property
    def N(self):
        return self.partition.N

    @property
    def precision(self):
        return "double" if self.data.dtype == np.float64 else "single"

    def _section(self, name):
        off = self.partition.offsets(self.L_s)
        order = ["leaf", "tile", "bridge", "gate", "end"]
        return self.data[off[name]:off[order[order.index(name) + 1]]]

    @property
    def F(self):
        """Leaf factors, shape ``(K, L, L)``."""
        p = self.partition
        return self._section("leaf").reshape(p.K, p.L, p.L)

    @property
    def B(self):
        """Coarse tile couplings, shape ``(M, L_s, L_s)``."""
        return self._section("tile").reshape(self.partition.M, self.L_s, self.L_s)

    @property
    def bridges(self):
        """Per-leaf bridge pairs, shape ``(K, 2, L, L_s)``; ``[:, 0]`` row, ``[:, 1]`` column."""
        p = self.partition
        return self._section("bridge").reshape(p.K, 2, p.L, self.L_s)

    @property
    def Ut(self):
        return self.bridges[:, 0]

    @property
    def Vt(self):
        return self.bridges[:, 1]

    @property
    def gate(self):
        return self._section("gate")

    def astype(self, precision):
        return FactorTensor(self.partition, self.L_s, self.data.astype(dtype_for(precision)),
                            self.shift, dict(self.metadata))

    def copy(self):
        return FactorTensor(self.partition, self.L_s, self.data.copy(), self.shift, dict(self.metadata))

    def scaled(self, alpha):
        """Factors whose operator is ``alpha * M`` (``alpha > 0``)."""
        out = self.copy()
        out.F[...] *= np.sqrt(alpha)
        out.B[...] *= alpha
        out.gate[...] *= alpha
        if out.shift is not None:
            raise ContractError("scaled() is undefined with a diagonal shift")
        return out

    def zero_offdiagonal(self):
        out = self.copy()
        out.B[...] = 0
        out.bridges[...] = 0
        return out


def init_factors(partition, L_s, mode="jacobi_seed", sigma=1e-2, stream=None, precision="single"):
    """Initial factor tensor.

    ``jacobi_seed`` sets the gate to one and draws every other section from
    N(0, sigma^2), so with ``sigma=0`` the operator is exactly Jacobi.
    ``random`` additionally perturbs the gate by N(0, sigma^2).
    """
    if mode not in ("jacobi_seed", "random"):
        raise ValueError(f"unknown init mode {mode!r}")
    if stream is None:
        stream = RngStream(0, purpose="init")
    P = packed_width(partition, L_s)
    data = sigma * sample_normal(stream, P) if sigma > 0 else np.zeros(P)
    ft = FactorTensor(partition, L_s, data.astype(dtype_for(precision)))
    if mode == "jacobi_seed":
        ft.gate[...] = 1.0
    else:
        ft.gate[...] += 1.0
    ft.metadata["init"] = {"mode": mode, "sigma": sigma, "seed": stream.seed}
    return ft


class _TileIndex:
    """Precomputed strip bounds for prefix-sum aggregation and scatter."""

    def __init__(self, partition):
        tiles = partition.tiles
        self.r_lo = np.array([t.row_start for t in tiles], dtype=np.intp)
        self.r_hi = self.r_lo + np.array([t.span for t in tiles], dtype=np.intp)
        self.c_lo = np.array([t.col_start for t in tiles], dtype=np.intp)
        self.c_hi = self.c_lo + np.array([t.span for t in tiles], dtype=np.intp)


class ApplyWorkspace:
    """Preallocated buffers for :func:`apply` with ``ncols`` right-hand sides."""

    def __init__(self, partition, L_s, ncols=1, precision="single"):
        K, L, M = partition.K, partition.L, partition.M
        dt = dtype_for(precision)
        self.partition = partition
        self.L_s = L_s
        self.ncols = ncols
        self.precision = precision
        self.index = _TileIndex(partition)
        self.x = np.empty((K, L, ncols), dt)
        self.tmp = np.empty((K, L, ncols), dt)
        self.y = np.empty((K, L, ncols), dt)
        self.yb = np.empty((K, L, ncols), dt)
        self.coarse = np.empty((K, 2, L_s, ncols), dt)  # u_hat, v_hat
        self.prefix = np.empty((K + 1, 2, L_s, ncols), np.float64)
        self.lo = np.empty((M, L_s, ncols), np.float64)
        self.hi = np.empty((M, L_s, ncols), np.float64)
        self.strip = np.empty((M, 2, L_s, ncols), np.float64)  # s_r, s_c
        self.strip_lp = np.empty((M, 2, L_s, ncols), dt)
        self.t = np.empty((M, 2, L_s, ncols), dt)  # t_r, t_c
        self.diffs = np.zeros((K + 1, 2, L_s, ncols), np.float64)
        self.gathered = np.empty((K, 2, L_s, ncols), np.float64)
        self.gathered_lp = np.empty((K, 2, L_s, ncols), dt)
        self.dinv = np.empty((K, L, 1), dt)

    def buffers(self):
        return {k: v for k, v in vars(self).items() if isinstance(v, np.ndarray)}

    def audit(self):
        """Snapshot of (address, nbytes) for each buffer; compare before/after apply."""
        return {k: (v.__array_interface__["data"][0], v.nbytes) for k, v in self.buffers().items()}


def apply(M, a_diag, r, ws=None, out=None):
    """Return ``M @ r`` for a vector or ``(N, ncols)`` block ``r``.

    GEMMs run at the factor precision; strip sums accumulate in float64.
    The gate term is added last.
    """
    p = M.partition
    r = np.asarray(r)
    vec = r.ndim == 1
    if r.shape[0] != p.N:
        raise ContractError(f"apply: r has length {r.shape[0]}, expected {p.N}")
    ncols = 1 if vec else r.shape[1]
    if ws is None:
        ws = ApplyWorkspace(p, M.L_s, ncols, M.precision)
    elif ws.partition != p or ws.ncols != ncols or ws.L_s != M.L_s or ws.precision != M.precision:
        raise ContractError("apply: workspace does not match factors / input")
    K, L, L_s = p.K, p.L, M.L_s
    idx = ws.index

    ws.x[...] = r.reshape(K, L, ncols)
    np.divide(1.0, np.asarray(a_diag).reshape(K, L, 1), out=ws.dinv)

    # diagonal leaves: F_k (F_k^T r_k)
    F = M.F
    batched_gemm(F, ws.x, trans_a=True, out=ws.tmp)
    batched_gemm(F, ws.tmp, out=ws.y)

    # restriction
    batched_gemm(M.Ut, ws.x, trans_a=True, out=ws.coarse[:, 0])
    batched_gemm(M.Vt, ws.x, trans_a=True, out=ws.coarse[:, 1])

    # strip aggregation via prefix sums over contiguous leaf ranges
    ws.prefix[0] = 0.0
    np.cumsum(ws.coarse, axis=0, dtype=np.float64, out=ws.prefix[1:])
    np.take(ws.prefix[:, 0], idx.r_hi, axis=0, out=ws.hi)
    np.take(ws.prefix[:, 0], idx.r_lo, axis=0, out=ws.lo)
    np.subtract(ws.hi, ws.lo, out=ws.strip[:, 0])
    np.take(ws.prefix[:, 1], idx.c_hi, axis=0, out=ws.hi)
    np.take(ws.prefix[:, 1], idx.c_lo, axis=0, out=ws.lo)
    np.subtract(ws.hi, ws.lo, out=ws.strip[:, 1])
    ws.strip_lp[...] = ws.strip

    # coarse coupling: t_r = B s_c, t_c = B^T s_r
    B = M.B
    batched_gemm(B, ws.strip_lp[:, 1], out=ws.t[:, 0])
    batched_gemm(B, ws.strip_lp[:, 0], trans_a=True, out=ws.t[:, 1])

    # redistribute tile outputs to their leaves (difference array + cumsum)
    ws.diffs[...] = 0.0
    np.add.at(ws.diffs[:, 0], idx.r_lo, ws.t[:, 0])
    np.subtract.at(ws.diffs[:, 0], idx.r_hi, ws.t[:, 0])
    np.add.at(ws.diffs[:, 1], idx.c_lo, ws.t[:, 1])
    np.subtract.at(ws.diffs[:, 1], idx.c_hi, ws.t[:, 1])
    np.cumsum(ws.diffs[:-1], axis=0, out=ws.gathered)
    ws.gathered_lp[...] = ws.gathered

    # prolongation
    batched_gemm(M.Ut, ws.gathered_lp[:, 0], out=ws.yb)
    ws.y += ws.yb
    batched_gemm(M.Vt, ws.gathered_lp[:, 1], out=ws.yb)
    ws.y += ws.yb

    # gate
    np.multiply(ws.x, ws.dinv, out=ws.tmp)
    ws.tmp *= M.gate.reshape(K, L, 1)
    ws.y += ws.tmp
    if M.shift is not None:
        ws.y += _softplus(M.shift) * ws.x

    res = ws.y.reshape(p.N, ncols)
    if vec:
        res = res[:, 0]
    if out is None:
        return res.astype(np.float64)
    out[...] = res
    return out


def _softplus(s):
    return float(np.logaddexp(0.0, s))


def assemble_dense(M, a_diag, cap=DENSE_CAP):
    """Dense float64 matrix of the preconditioner (diagnostics and oracles)."""
    p = M.partition
    if p.N > cap:
        raise ContractError(f"assemble_dense: N={p.N} exceeds dense cap {cap}")
    L = p.L
    F = M.F.astype(np.float64)
    Ut = M.Ut.astype(np.float64)
    Vt = M.Vt.astype(np.float64)
    B = M.B.astype(np.float64)
    D = np.zeros((p.N, p.N))
    for k in range(p.K):
        s = p.leaf_slice(k)
        D[s, s] = F[k] @ F[k].T
    for t in p.tiles:
        rows = slice(t.row_start * L, (t.row_start + t.span) * L)
        cols = slice(t.col_start * L, (t.col_start + t.span) * L)
        Ur = Ut[t.row_start:t.row_start + t.span].reshape(-1, M.L_s)
        Vc = Vt[t.col_start:t.col_start + t.span].reshape(-1, M.L_s)
        blk = Ur @ B[t.id] @ Vc.T
        D[rows, cols] += blk
        D[cols, rows] += blk.T
    D[np.diag_indices(p.N)] += M.gate.astype(np.float64) / np.asarray(a_diag, dtype=np.float64)
    if M.shift is not None:
        D[np.diag_indices(p.N)] += _softplus(M.shift)
    return D


def apply_transposed_tiles_check(M, a_diag, r):
    """Relative mismatch between the matrix-free apply and the assembled matrix."""
    ref = assemble_dense(M, a_diag) @ np.asarray(r, dtype=np.float64)
    got = apply(M, a_diag, r)
    return float(np.linalg.norm(got - ref) / np.linalg.norm(ref))


def apply_flops(partition, L_s, ncols=1):
    """Scalar multiplies in one apply (GEMMs plus gate)."""
    K, L, M, N = partition.K, partition.L, partition.M, partition.N
    gemm = 2 * K * L * L + 4 * K * L * L_s + 2 * M * L_s * L_s
    return (gemm + 2 * N) * ncols


# -- differentiable path (float64), used by training -------------------------

def forward_cached(M, dinv, X):
    """``Y = M @ X`` in float64 for a block ``X`` of shape ``(N, c)``, with a
    cache of intermediates for :func:`backward`."""
    p = M.partition
    K, L, L_s = p.K, p.L, M.L_s
    c = X.shape[1]
    R, C = p.row_indicator(), p.col_indicator()
    F = M.F.astype(np.float64, copy=False)
    Ut = M.Ut.astype(np.float64, copy=False)
    Vt = M.Vt.astype(np.float64, copy=False)
    B = M.B.astype(np.float64, copy=False)
    gate = M.gate.astype(np.float64, copy=False)

    Xk = X.reshape(K, L, c)
    FtX = np.matmul(F.transpose(0, 2, 1), Xk)
    Y = np.matmul(F, FtX)
    u = np.matmul(Ut.transpose(0, 2, 1), Xk)
    v = np.matmul(Vt.transpose(0, 2, 1), Xk)
    sr = (R @ u.reshape(K, -1)).reshape(-1, L_s, c)
    sc = (C @ v.reshape(K, -1)).reshape(-1, L_s, c)
    tr = np.matmul(B, sc)
    tc = np.matmul(B.transpose(0, 2, 1), sr)
    a = (R.T @ tr.reshape(p.M, -1)).reshape(K, L_s, c)
    b = (C.T @ tc.reshape(p.M, -1)).reshape(K, L_s, c)
    Y += np.matmul(Ut, a) + np.matmul(Vt, b)
    Y = Y.reshape(p.N, c) + (gate * dinv)[:, None] * X
    if M.shift is not None:
        Y += _softplus(M.shift) * X
    cache = dict(X=X, FtX=FtX, sr=sr, sc=sc, a=a, b=b)
    return Y, cache


def backward(M, dinv, cache, G):
    """Gradient of ``<G, M @ X>`` with respect to the packed factor data."""
    p = M.partition
    K, L, L_s = p.K, p.L, M.L_s
    X = cache["X"]
    c = X.shape[1]
    R, C = p.row_indicator(), p.col_indicator()
    F = M.F.astype(np.float64, copy=False)
    Ut = M.Ut.astype(np.float64, copy=False)
    Vt = M.Vt.astype(np.float64, copy=False)
    B = M.B.astype(np.float64, copy=False)

    grad = FactorTensor(p, M.L_s, np.zeros(packed_width(p, M.L_s)))
    Xk = X.reshape(K, L, c)
    Gk = G.reshape(K, L, c)

    # y_k = F F^T x_k  ->  dF = G x^T F + x G^T F
    GtF = np.matmul(Gk.transpose(0, 2, 1), F)
    grad.F[...] = np.matmul(Gk, cache["FtX"].transpose(0, 2, 1)) + np.matmul(Xk, GtF)

    # prolongation
    grad.Ut[...] = np.matmul(Gk, cache["a"].transpose(0, 2, 1))
    grad.Vt[...] = np.matmul(Gk, cache["b"].transpose(0, 2, 1))
    da = np.matmul(Ut.transpose(0, 2, 1), Gk)
    db = np.matmul(Vt.transpose(0, 2, 1), Gk)
    dtr = (R @ da.reshape(K, -1)).reshape(-1, L_s, c)
    dtc = (C @ db.reshape(K, -1)).reshape(-1, L_s, c)

    # coarse coupling: tr = B sc, tc = B^T sr
    sr, sc = cache["sr"], cache["sc"]
    grad.B[...] = np.matmul(dtr, sc.transpose(0, 2, 1)) + np.matmul(sr, dtc.transpose(0, 2, 1))
    dsc = np.matmul(B.transpose(0, 2, 1), dtr)
    dsr = np.matmul(B, dtc)

    # restriction through strip sums
    du = (R.T @ dsr.reshape(p.M, -1)).reshape(K, L_s, c)
    dv = (C.T @ dsc.reshape(p.M, -1)).reshape(K, L_s, c)
    grad.Ut[...] += np.matmul(Xk, du.transpose(0, 2, 1))
    grad.Vt[...] += np.matmul(Xk, dv.transpose(0, 2, 1))

    grad.gate[...] = np.einsum("ij,ij->i", G, X) * dinv
    return grad
