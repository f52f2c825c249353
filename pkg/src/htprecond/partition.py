"""Weak-admissibility (HODLR) block partition and packed factor layout."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .validation import ConfigError


@dataclass(frozen=True)
class TileSpec:
    """Off-diagonal tile coupling row leaves ``[row_start, row_start+span)``
    with column leaves ``[col_start, col_start+span)``."""

    id: int
    span: int
    row_start: int
    col_start: int
    depth: int

    @property
    def rows(self):
        return range(self.row_start, self.row_start + self.span)

    @property
    def cols(self):
        return range(self.col_start, self.col_start + self.span)


@dataclass(frozen=True)
class HPartition:
    N: int
    L: int
    tiles: tuple
    eta: float = 1.0
    _membership: dict = field(default=None, compare=False, repr=False)

    @property
    def K(self):
        return self.N // self.L

    @property
    def M(self):
        """Number of unique off-diagonal tiles."""
        return len(self.tiles)

    @property
    def spans(self):
        return np.array([t.span for t in self.tiles], dtype=np.int64)

    def leaf_slice(self, k):
        return slice(k * self.L, (k + 1) * self.L)

    def row_indicator(self):
        """Sparse ``(M, K)`` 0/1 matrix with ``[m, k] = 1`` iff leaf k is in R_m."""
        return self._indicators()[0]

    def col_indicator(self):
        return self._indicators()[1]

    def _indicators(self):
        if self._membership is None:
            rows, cols, ridx, cidx = [], [], [], []
            for t in self.tiles:
                ridx.extend(t.rows)
                rows.extend([t.id] * t.span)
                cidx.extend(t.cols)
                cols.extend([t.id] * t.span)
            shape = (self.M, self.K)
            R = sp.csr_matrix((np.ones(len(rows)), (rows, ridx)), shape=shape)
            C = sp.csr_matrix((np.ones(len(cols)), (cols, cidx)), shape=shape)
            object.__setattr__(self, "_membership", {"R": R, "C": C})
        return self._membership["R"], self._membership["C"]

    def offsets(self, L_s):
        """Start offsets of each packed section for coarse size ``L_s``."""
        K, L, M, N = self.K, self.L, self.M, self.N
        leaf = 0
        tile = leaf + K * L * L
        bridge = tile + M * L_s * L_s
        gate = bridge + 2 * N * L_s
        return {"leaf": leaf, "tile": tile, "bridge": bridge, "gate": gate, "end": gate + N}

    def describe(self, L_s=None):
        out = {
            "N": self.N,
            "L": self.L,
            "K": self.K,
            "eta": self.eta,
            "leaves": [[k * self.L, (k + 1) * self.L] for k in range(self.K)],
            "tiles": [
                {"id": t.id, "span": t.span, "depth": t.depth,
                 "rows": [t.row_start, t.row_start + t.span],
                 "cols": [t.col_start, t.col_start + t.span]}
                for t in self.tiles
            ],
        }
        if L_s is not None:
            out["L_s"] = L_s
            out["offsets"] = self.offsets(L_s)
            out["packed_width"] = packed_width(self, L_s)
        return out

    def to_json(self, L_s=None):
        return json.dumps(self.describe(L_s), indent=2)


def _is_pow2(k):
    return k >= 1 and (k & (k - 1)) == 0


def effective_leaf_size(N, L):
    """Clamp the leaf size so tiny systems still form a two-leaf partition."""
    if N < 2 * L:
        return max(N // 2, 1)
    return L


def build_partition(N, L):
    """Weak-admissibility partition of ``N`` unknowns into ``N/L`` leaves.

    Recursive bisection of the leaf range; each internal node emits one tile
    coupling its left half (rows) to its right half (columns). Tiles are listed
    breadth-first, so larger spans come first.
    """
    if L <= 0 or N % L:
        raise ConfigError(f"leaf size L={L} must divide N={N}")
    K = N // L
    if K < 2 or not _is_pow2(K):
        raise ConfigError(f"leaf count K=N/L={K} must be a power of two >= 2")
    tiles = []
    level = [(0, K)]
    depth = 0
    while level:
        nxt = []
        for lo, hi in level:
            if hi - lo < 2:
                continue
            half = (hi - lo) // 2
            tiles.append(TileSpec(len(tiles), half, lo, lo + half, depth))
            nxt.extend([(lo, lo + half), (lo + half, hi)])
        level = nxt
        depth += 1
    return HPartition(N=N, L=L, tiles=tuple(tiles))


def packed_width(partition, L_s):
    """Element count ``K L^2 + M L_s^2 + 2 N L_s + N`` of the packed tensor."""
    if L_s <= 0 or partition.L % L_s:
        raise ConfigError(f"coarse size L_s={L_s} must divide L={partition.L}")
    p = partition
    return p.K * p.L**2 + p.M * L_s**2 + 2 * p.N * L_s + p.N


def tile_membership(partition):
    """For each leaf, the tile ids whose row range / column range contain it."""
    row_of = [[] for _ in range(partition.K)]
    col_of = [[] for _ in range(partition.K)]
    for t in partition.tiles:
        for k in t.rows:
            row_of[k].append(t.id)
        for k in t.cols:
            col_of[k].append(t.id)
    return row_of, col_of


def provided_rank_fraction(span, L, L_s):
    return L_s / (span * L)
