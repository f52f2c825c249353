"""Forward-only two-stream transformer that emits a packed factor tensor.

Toy-scale numpy implementation used to check shapes, routing and
conservation. Nothing here is trained.

Pipeline: node encoder (MLP lift plus residual graph convolutions on
``diag(A)^-1 A``), then ``n_l`` layers of

* within-leaf attention over ``(K, L, d)`` tokens (leaf family),
* within-tile attention over ``(M, L_s, d)`` strip-pooled tokens (tile family),
* highway scatter into row / column / global buffers and a 4d-wide FFN,

followed by decoder heads that fill the packed layout.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .factors import FactorTensor
from .linalg import RngStream
from .partition import packed_width
from .validation import ConfigError, ContractError

N_NODE_FEATURES = 7  # rho, u, v, four boundary flags
N_EDGE_FEATURES = 4  # dx, dy, dist, A_ij


@dataclass(frozen=True)
class ToyNetConfig:
    d: int = 16
    n_l: int = 2
    h: int = 2
    n_gcn: int = 2
    L: int = 16
    L_s: int = 4
    d_glob: int = 12
    d_edge: int = 16
    head_scale: float = 0.1

    def __post_init__(self):
        if self.d % self.h:
            raise ConfigError(f"heads h={self.h} must divide width d={self.d}")
        if self.L_s <= 0 or self.L % self.L_s:
            raise ConfigError(f"L_s={self.L_s} must divide L={self.L}")

    @property
    def p_off(self):
        return self.L // self.L_s


@dataclass
class ToyNetWeights:
    params: dict
    seed: int = 0

    def __getitem__(self, key):
        return self.params[key]

    def zeros_like(self):
        return ToyNetWeights({k: np.zeros_like(v) for k, v in self.params.items()}, self.seed)


@dataclass
class HighwayBuffers:
    r_hw: np.ndarray
    c_hw: np.ndarray
    g_hw: np.ndarray


@dataclass
class ForwardTrace:
    dispatch: Counter = field(default_factory=Counter)
    max_rowsum_err: float = 0.0
    layers: list = field(default_factory=list)


# -- weights ------------------------------------------------------------------

def _dense(g, fan_in, fan_out, scale=1.0):
    return scale * g.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)


def init_weights(cfg, seed=0):
    """Deterministic random weights for ``cfg``."""
    g = RngStream(seed, purpose="toynet").generator()
    d, de, hs = cfg.d, cfg.d_edge, cfg.head_scale
    p = {}
    n_in = N_NODE_FEATURES + cfg.d_glob
    p["enc_w1"], p["enc_b1"] = _dense(g, n_in, d), np.zeros(d)
    p["enc_w2"], p["enc_b2"] = _dense(g, d, d), np.zeros(d)
    for i in range(cfg.n_gcn):
        p[f"gcn{i}_w"], p[f"gcn{i}_b"] = _dense(g, d, d), np.zeros(d)
    p["pool_r"], p["pool_c"] = _dense(g, d, d), _dense(g, d, d)
    for layer in range(cfg.n_l):
        for s in ("diag", "tile"):
            pre = f"l{layer}_{s}_"
            for name in ("q", "k", "v", "o"):
                p[pre + name] = _dense(g, d, d)
            p[pre + "eb_w1"], p[pre + "eb_b1"] = _dense(g, N_EDGE_FEATURES, de), np.zeros(de)
            p[pre + "eb_w2"], p[pre + "eb_b2"] = _dense(g, de, cfg.h), np.zeros(cfg.h)
            p[pre + "ffn_w1"], p[pre + "ffn_b1"] = _dense(g, 4 * d, 4 * d), np.zeros(4 * d)
            p[pre + "ffn_w2"], p[pre + "ffn_b2"] = _dense(g, 4 * d, d), np.zeros(d)
    p["leaf_w1"], p["leaf_b1"] = _dense(g, d, d), np.zeros(d)
    p["leaf_w2"], p["leaf_b2"] = _dense(g, d, cfg.L, hs), np.zeros(cfg.L)
    p["u_w"], p["v_w"] = _dense(g, d, cfg.L_s, hs), _dense(g, d, cfg.L_s, hs)
    p["ut_w"], p["vt_w"] = _dense(g, d, cfg.L_s, hs), _dense(g, d, cfg.L_s, hs)
    p["gate_w"], p["gate_b"] = _dense(g, d, 1, hs), np.ones(1)
    return ToyNetWeights(p, seed)


# -- building blocks ----------------------------------------------------------

def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x**3)))


def layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def attention(x, bias, w, prefix, h, family, trace):
    """Batched multi-head self-attention over ``x`` of shape ``(G, T, d)``.

    ``bias`` has shape ``(G, h, T, T)``. One call is one kernel dispatch of
    ``family``.
    """
    G, T, d = x.shape
    dh = d // h

    def heads(t):
        return t.reshape(G, T, h, dh).transpose(0, 2, 1, 3)

    q, k, v = (heads(x @ w[prefix + n]) for n in "qkv")
    logits = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + bias
    attn = softmax(logits)
    if trace is not None:
        trace.dispatch[family] += 1
        trace.max_rowsum_err = max(trace.max_rowsum_err, float(np.abs(attn.sum(-1) - 1.0).max()))
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(G, T, d)
    return out @ w[prefix + "o"]


def _edge_bias(feats, w, prefix):
    hid = gelu(feats @ w[prefix + "eb_w1"] + w[prefix + "eb_b1"])
    return np.moveaxis(hid @ w[prefix + "eb_w2"] + w[prefix + "eb_b2"], -1, -3)


# -- features -----------------------------------------------------------------

def node_features(frame):
    """Per-node ``(rho, u, v, left, right, bottom, top)``."""
    xy = frame.coords
    x, y = xy[:, 0], xy[:, 1]
    W, H = frame.W, frame.H
    present = np.zeros(W * H, dtype=bool)
    present[frame.cells] = True

    def missing(nx, ny):
        out = np.ones(len(nx), dtype=bool)
        ok = (nx >= 0) & (nx < W) & (ny >= 0) & (ny < H)
        out[ok] = ~present[ny[ok] * W + nx[ok]]
        return out

    flags = [missing(x - 1, y), missing(x + 1, y), missing(x, y - 1), missing(x, y + 1)]
    u = (x + 0.5) / W
    v = (y + 0.5) / H
    return np.column_stack([frame.rho, u, v] + [f.astype(float) for f in flags])


def global_context(frame, width=12):
    """Permutation-invariant frame statistics, zero-padded to ``width``."""
    A = frame.A
    diag = A.diagonal()
    lr = np.log(frame.rho)
    off = -(A - sp.diags(diag)).data
    stats = [lr.mean(), lr.std(), lr.min(), lr.max(),
             np.log(diag).mean(), np.log(diag).std(),
             np.log(off.max()) if off.size else 0.0, np.log(off.min()) if off.size else 0.0,
             A.nnz / A.shape[0], np.log(frame.N), frame.W / frame.H, np.abs(frame.b).mean()]
    out = np.zeros(width)
    n = min(width, len(stats))
    out[:n] = stats[:n]
    return out


def _leaf_edges(frame, partition):
    """``(K, L, L, 4)`` edge descriptors for within-leaf pairs."""
    K, L = partition.K, partition.L
    xy = frame.coords.astype(float).reshape(K, L, 2)
    delta = xy[:, :, None, :] - xy[:, None, :, :]
    dist = np.linalg.norm(delta, axis=-1, keepdims=True)
    blocks = np.stack([frame.A[partition.leaf_slice(k)][:, partition.leaf_slice(k)].toarray()
                       for k in range(K)])
    return np.concatenate([delta, dist, blocks[..., None]], axis=-1)


def _substrip_pool(n_nodes, L_s):
    """Sparse ``(L_s, n_nodes)`` uniform mean-pooling matrix."""
    width = n_nodes // L_s
    rows = np.repeat(np.arange(L_s), width)
    return sp.csr_matrix((np.full(n_nodes, 1.0 / width), (rows, np.arange(n_nodes))),
                         shape=(L_s, n_nodes))


def _tile_edges(frame, partition, L_s):
    """``(M, L_s, L_s, 4)`` mean edge descriptors over sub-strip node pairs.

    Mean offsets come from sub-strip centroids; mean ``A_ij`` is a sparse
    pooled product restricted to the tile.
    """
    L = partition.L
    xy = frame.coords.astype(float)
    out = np.empty((partition.M, L_s, L_s, N_EDGE_FEATURES))
    for t in partition.tiles:
        rs = slice(t.row_start * L, (t.row_start + t.span) * L)
        cs = slice(t.col_start * L, (t.col_start + t.span) * L)
        P = _substrip_pool(t.span * L, L_s)
        cr, cc = P @ xy[rs], P @ xy[cs]
        delta = cr[:, None, :] - cc[None, :, :]
        out[t.id, ..., :2] = delta
        out[t.id, ..., 2] = np.linalg.norm(delta, axis=-1)
        out[t.id, ..., 3] = (P @ frame.A[rs][:, cs] @ P.T).toarray()
    return out


# -- network ------------------------------------------------------------------

def _check_inputs(frame, partition, cfg):
    if frame.N != partition.N:
        raise ContractError(f"frame has N={frame.N}, partition N={partition.N}")
    if partition.L != cfg.L:
        raise ContractError(f"partition leaf size {partition.L} != config L={cfg.L}")


def encode(frame, partition, cfg, weights):
    """Node embeddings of shape ``(N, d)``."""
    _check_inputs(frame, partition, cfg)
    w = weights
    glob = np.broadcast_to(global_context(frame, cfg.d_glob), (frame.N, cfg.d_glob))
    f = np.concatenate([node_features(frame), glob], axis=1)
    x = gelu(f @ w["enc_w1"] + w["enc_b1"]) @ w["enc_w2"] + w["enc_b2"]
    A = frame.A
    P = sp.diags(1.0 / A.diagonal()) @ A
    for i in range(cfg.n_gcn):
        x = x + gelu(P @ x @ w[f"gcn{i}_w"] + w[f"gcn{i}_b"])
    return x


def _pool_tiles(x, partition, cfg, w):
    L = partition.L
    toks = np.empty((partition.M, cfg.L_s, cfg.d))
    for t in partition.tiles:
        P = _substrip_pool(t.span * L, cfg.L_s)
        rows = x[t.row_start * L:(t.row_start + t.span) * L]
        cols = x[t.col_start * L:(t.col_start + t.span) * L]
        toks[t.id] = (P @ rows) @ w["pool_r"] + (P @ cols) @ w["pool_c"]
    return toks


def _expanded_tile(tok, cfg):
    """Repeat-interleave ``(L_s, d)`` tile tokens to one leaf's ``(L, d)``."""
    return np.repeat(tok, cfg.p_off, axis=0)


def scatter_highways(diag_tok, tile_tok, partition, cfg):
    """Scatter-add diagonal and tile tokens into fresh highway buffers."""
    N, L, d = partition.N, partition.L, cfg.d
    hw = HighwayBuffers(np.zeros((N, d)), np.zeros((N, d)), np.zeros(d))
    flat = diag_tok.reshape(N, d)
    hw.r_hw += flat
    hw.c_hw += flat
    hw.g_hw += flat.sum(axis=0)
    for t in partition.tiles:
        leaf = _expanded_tile(tile_tok[t.id], cfg)
        hw.r_hw[t.row_start * L:(t.row_start + t.span) * L] += np.tile(leaf, (t.span, 1))
        hw.c_hw[t.col_start * L:(t.col_start + t.span) * L] += np.tile(leaf, (t.span, 1))
        hw.g_hw += tile_tok[t.id].sum(axis=0)
    return hw


def _gather_tiles(buf, partition, cfg, row):
    L = partition.L
    out = np.empty((partition.M, cfg.L_s, cfg.d))
    for t in partition.tiles:
        lo = (t.row_start if row else t.col_start) * L
        out[t.id] = _substrip_pool(t.span * L, cfg.L_s) @ buf[lo:lo + t.span * L]
    return out


def _ffn(x, ctx, w, prefix):
    z = layer_norm(np.concatenate([x] + ctx, axis=-1))
    return gelu(z @ w[prefix + "ffn_w1"] + w[prefix + "ffn_b1"]) @ w[prefix + "ffn_w2"] + w[prefix + "ffn_b2"]


def forward(frame, partition, cfg, weights, trace=None):
    """Run the network and return a float32 :class:`FactorTensor` of width P."""
    _check_inputs(frame, partition, cfg)
    w = weights
    K, L, M, N, d = partition.K, partition.L, partition.M, partition.N, cfg.d
    x = encode(frame, partition, cfg, weights)
    leaf_edges = _leaf_edges(frame, partition)
    tile_edges = _tile_edges(frame, partition, cfg.L_s)

    xd = x.reshape(K, L, d).copy()
    xt = _pool_tiles(x, partition, cfg, w)
    for layer in range(cfg.n_l):
        pd, pt = f"l{layer}_diag_", f"l{layer}_tile_"
        xd = xd + attention(layer_norm(xd), _edge_bias(leaf_edges, w, pd), w, pd, cfg.h, "leaf", trace)
        xt = xt + attention(layer_norm(xt), _edge_bias(tile_edges, w, pt), w, pt, cfg.h, "tile", trace)

        hw = scatter_highways(xd, xt, partition, cfg)  # fresh per layer
        if trace is not None:
            trace.layers.append({"diag": xd.copy(), "tile": xt.copy(), "buffers": hw,
                                 "spans": partition.spans})
        g = np.broadcast_to(hw.g_hw, (K, L, d))
        xd = xd + _ffn(xd, [hw.r_hw.reshape(K, L, d), hw.c_hw.reshape(K, L, d), g], w, pd)
        gt = np.broadcast_to(hw.g_hw, (M, cfg.L_s, d))
        xt = xt + _ffn(xt, [_gather_tiles(hw.r_hw, partition, cfg, True),
                            _gather_tiles(hw.c_hw, partition, cfg, False), gt], w, pt)

    return decode(xd, xt, partition, cfg, weights)


def decode(xd, xt, partition, cfg, weights):
    w = weights
    N = partition.N
    ft = FactorTensor(partition, cfg.L_s, np.zeros(packed_width(partition, cfg.L_s), np.float32))
    ft.F[...] = gelu(xd @ w["leaf_w1"] + w["leaf_b1"]) @ w["leaf_w2"] + w["leaf_b2"]
    U = xt @ w["u_w"]
    V = xt @ w["v_w"]
    ft.B[...] = U @ V.transpose(0, 2, 1)
    ft.Ut[...] = xd @ w["ut_w"]
    ft.Vt[...] = xd @ w["vt_w"]
    ft.gate[...] = (xd.reshape(N, -1) @ w["gate_w"] + w["gate_b"])[:, 0]
    ft.metadata["source"] = {"model": "toy_network", "seed": weights.seed}
    return ft


def highway_conservation_check(trace):
    """Largest relative deviation between buffer totals and the brute-force
    sum of every contributing token embedding, over all layers and buffers."""
    worst = 0.0
    for rec in trace.layers:
        diag, tile, hw = rec["diag"], rec["tile"], rec["buffers"]
        d = diag.shape[-1]
        diag_sum = np.zeros(d)
        for tok in diag.reshape(-1, d):
            diag_sum += tok
        tile_sum = np.zeros(d)
        for m in range(tile.shape[0]):
            for tok in tile[m]:
                tile_sum += tok
        p_off = diag.shape[1] // tile.shape[1]
        expanded = np.zeros(d)
        for m, span in enumerate(rec["spans"]):
            expanded += span * p_off * tile[m].sum(axis=0)
        for got, want in ((hw.r_hw.sum(axis=0), diag_sum + expanded),
                          (hw.c_hw.sum(axis=0), diag_sum + expanded),
                          (hw.g_hw, diag_sum + tile_sum)):
            scale = max(np.abs(want).max(), np.abs(got).max(), 1e-300)
            worst = max(worst, float(np.abs(got - want).max() / scale))
    return worst

