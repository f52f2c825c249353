"""Multiphase pressure-Poisson benchmark frames.

Each frame is a 2-D structured grid, Morton-ordered and truncated to N cells,
with a two-phase density field made of random barriers and the 5-point
Laplacian assembled from harmonic-mean face conductances under zero-flux
boundaries.
"""

from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .linalg import RngStream, morton_encode, sample_normal
from .validation import ConfigError, ContractError

ORIENTATIONS = ("vertical", "horizontal")
GAPS = ("top", "bottom", "middle_hole", "closed")
GAP_FRACTION = 0.2
NOISE_STD = 0.05
NOISE_FLOOR = 0.5
RHO_HEAVY_RANGE = (5.0, 100.0)
STANDARD_SCALES = (1024, 2048, 4096, 8192, 16384)


@dataclass(frozen=True)
class BarrierSpec:
    orientation: str
    center: float
    thickness: float
    gap: str

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ContractError(f"bad orientation {self.orientation!r}")
        if self.gap not in GAPS:
            raise ContractError(f"bad gap {self.gap!r}")
        if not 0.2 <= self.center <= 0.8:
            raise ContractError(f"barrier center {self.center} outside [0.2, 0.8]")
        if not 0.05 <= self.thickness <= 0.20:
            raise ContractError(f"barrier thickness {self.thickness} outside [0.05, 0.20]")

    def heavy_mask(self, u, v):
        """Boolean mask of cells (normalized coords u=x, v=y) in the heavy region."""
        cross, along = (u, v) if self.orientation == "vertical" else (v, u)
        slab = np.abs(cross - self.center) <= 0.5 * self.thickness
        if self.gap == "top":
            gap = along >= 1.0 - GAP_FRACTION
        elif self.gap == "bottom":
            gap = along < GAP_FRACTION
        elif self.gap == "middle_hole":
            gap = np.abs(along - 0.5) < 0.5 * GAP_FRACTION
        else:
            gap = np.zeros_like(slab)
        return slab & ~gap

    def to_dict(self):
        return {"orientation": self.orientation, "center": self.center,
                "thickness": self.thickness, "gap": self.gap}


@dataclass
class Frame:
    N: int
    W: int
    H: int
    cells: np.ndarray  # grid cell id (y * W + x) per unknown, Morton order
    rho: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    seed: int = 0
    index: int = 0
    split: str = "train"
    rho_heavy: float = 1.0
    barriers: list = field(default_factory=list)

    @property
    def coords(self):
        """Integer grid coordinates ``(x, y)`` per unknown, shape ``(N, 2)``."""
        return np.stack([self.cells % self.W, self.cells // self.W], axis=1)

    @property
    def frame_id(self):
        return f"N{self.N}-{self.split}-{self.index:05d}"


def grid_dims(N):
    """Near-square grid ``W = ceil(sqrt N)``, ``H = ceil(N / W)``."""
    if N < 4:
        raise ConfigError(f"N={N} too small for a grid")
    W = math.isqrt(N)
    if W * W < N:
        W += 1
    return W, -(-N // W)


def morton_cells(N, W, H):
    """First N cells of the W x H grid in Morton order, as ``y * W + x`` ids."""
    y, x = np.divmod(np.arange(W * H), W)
    codes = morton_encode(x, y)
    order = np.argsort(codes, kind="stable")
    return order[:N]


def sample_barriers(stream):
    g = stream.generator()
    n_b = int(g.integers(1, 4))
    out = []
    for _ in range(n_b):
        out.append(BarrierSpec(
            orientation=ORIENTATIONS[int(g.integers(0, 2))],
            center=float(g.uniform(0.2, 0.8)),
            thickness=float(g.uniform(0.05, 0.20)),
            gap=GAPS[int(g.integers(0, 4))],
        ))
    return out


def sample_density(dims, stream, cells=None, barriers=None, rho_heavy=None):
    """Density per cell, the barrier list and the heavy-phase density.

    ``dims`` is ``(W, H)``. Returns values for ``cells`` (all W*H cells in
    row-major order when omitted). Pass ``barriers`` / ``rho_heavy`` to pin the
    topology or contrast; the noise still comes from ``stream``.
    """
    W, H = dims
    if cells is None:
        cells = np.arange(W * H)
    g = stream.child(purpose=stream.purpose + "/contrast").generator()
    lo, hi = RHO_HEAVY_RANGE
    drawn = float(np.exp(g.uniform(np.log(lo), np.log(hi))))
    if rho_heavy is None:
        rho_heavy = drawn
    if barriers is None:
        barriers = sample_barriers(stream.child(purpose=stream.purpose + "/barriers"))
    y, x = np.divmod(cells, W)
    u = (x + 0.5) / W
    v = (y + 0.5) / H
    heavy = np.zeros(len(cells), dtype=bool)
    for bar in barriers:
        heavy |= bar.heavy_mask(u, v)
    rho = np.where(heavy, rho_heavy, 1.0)
    noise = sample_normal(stream.child(purpose=stream.purpose + "/noise"), len(cells))
    rho = rho * np.maximum(1.0 + NOISE_STD * noise, NOISE_FLOOR)
    return rho, barriers, rho_heavy


def harmonic_conductance(rho_i, rho_j):
    return 2.0 * rho_i * rho_j / (rho_i + rho_j)


def assemble_operator(rho, dims, cells):
    """Neumann 5-point Laplacian with harmonic-mean face weights.

    Faces to cells outside the retained set contribute nothing. Rows and
    columns follow the order of ``cells``.
    """
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho <= 0):
        raise ContractError("assemble_operator: density must be positive")
    W, H = dims
    n = len(cells)
    where = np.full(W * H, -1, dtype=np.int64)
    where[cells] = np.arange(n)
    y, x = np.divmod(np.asarray(cells), W)
    rows, cols, vals = [], [], []
    for dx, dy in ((1, 0), (0, 1)):
        nx, ny = x + dx, y + dy
        ok = (nx < W) & (ny < H)
        j = np.full(n, -1, dtype=np.int64)
        j[ok] = where[ny[ok] * W + nx[ok]]
        i = np.nonzero(j >= 0)[0]
        j = j[i]
        w = harmonic_conductance(rho[i], rho[j])
        rows += [i, j]
        cols += [j, i]
        vals += [-w, -w]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    diag = np.zeros(n)
    np.add.at(diag, rows, -vals)
    rows = np.concatenate([rows, np.arange(n)])
    cols = np.concatenate([cols, np.arange(n)])
    vals = np.concatenate([vals, diag])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    A.sort_indices()
    return A


def sample_rhs(N, stream):
    """Standard normal vector projected onto the complement of constants."""
    z = sample_normal(stream, N)
    return project_out_constant(z)


def project_out_constant(z):
    z = np.asarray(z, dtype=np.float64)
    return z - z.mean(axis=0)


def check_divisible(N, L):
    if N % L:
        raise ConfigError(f"N={N} is not divisible by leaf size L={L}")


def generate_frame(N, seed, index=0, split="train", barriers=None, rho_heavy=None):
    W, H = grid_dims(N)
    cells = morton_cells(N, W, H)
    base = RngStream(seed, frame=index, purpose=f"{split}")
    rho, barriers, rho_heavy = sample_density((W, H), base.child(purpose=f"{split}/density"),
                                              cells=cells, barriers=barriers, rho_heavy=rho_heavy)
    A = assemble_operator(rho, (W, H), cells)
    b = sample_rhs(N, base.child(purpose=f"{split}/rhs"))
    return Frame(N=N, W=W, H=H, cells=cells, rho=rho, A=A, b=b, seed=seed, index=index,
                 split=split, rho_heavy=rho_heavy, barriers=barriers)


def generate_dataset(out_dir, scales, n_train=100, n_test=20, seed=0, leaf_size=128):
    """Write MPPF frames to ``out_dir/N{N}/{train,test}/frame_XXXXX.mppf``.

    Train and test frames draw from disjoint stream keys (the split name is
    part of every key). Returns the written paths.
    """
    from .io import write_frame

    out_dir = Path(out_dir)
    paths = []
    for N in scales:
        if N < 256:
            raise ConfigError(f"scale N={N} below the minimum of 256")
        check_divisible(N, min(leaf_size, N // 2))
        for split, count in (("train", n_train), ("test", n_test)):
            d = out_dir / f"N{N}" / split
            d.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                fr = generate_frame(N, seed, index=i, split=split)
                path = d / f"frame_{i:05d}.mppf"
                write_frame(path, fr)
                paths.append(path)
    return paths


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def default_data_dir():
    return Path(os.environ.get("HTPRECOND_DATA", "data"))
