"""Self-supervised fitting of the factor tensor.

The objective is one global cosine between the probe block ``Z`` and its
preconditioned image ``M A Z``; an SAI-style Frobenius loss is available for
ablation. Gradients are hand-derived adjoints through the apply chain
(:func:`htprecond.factors.backward`). Optimization uses AdamW with global
gradient clipping and a reduce-on-plateau learning-rate schedule.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .factors import FactorTensor, backward, forward_cached, init_factors
from .linalg import RngStream, sample_normal, spmv
from .validation import ConfigError, check_positive_diagonal


class DegenerateLoss(ArithmeticError):
    """The loss is undefined (zero probe block or zero image)."""


@dataclass
class ProbeBatch:
    Z: np.ndarray
    omega: float | None = None
    steps: int = 0
    frame_id: str | None = None

    @property
    def k(self):
        return self.Z.shape[1]


def probe_count(N):
    """``max(64, ceil(sqrt(N)))``."""
    r = math.isqrt(N)
    if r * r < N:
        r += 1
    return max(64, r)


def sample_probes(N, stream, k=None, frame_id=None):
    k = probe_count(N) if k is None else k
    return ProbeBatch(sample_normal(stream, (N, k)), frame_id=frame_id)


def smooth_probes(A, Z, omega=0.6, steps=2):
    """Damped-Jacobi sweeps ``z <- z - omega D^{-1} A z`` applied to each column."""
    dinv = 1.0 / check_positive_diagonal(A)
    Z = np.array(Z, dtype=np.float64)
    vec = Z.ndim == 1
    if vec:
        Z = Z[:, None]
    for _ in range(steps):
        Z -= omega * dinv[:, None] * spmv(A, Z)
    return Z[:, 0] if vec else Z


def smoothed_batch(A, stream, k=None, omega=0.6, steps=2, frame_id=None):
    pb = sample_probes(A.shape[0], stream, k, frame_id)
    pb.Z = smooth_probes(A, pb.Z, omega, steps)
    pb.omega, pb.steps = omega, steps
    return pb


def cosine_loss(Z, Y):
    """``1 - <Z, Y>_F / (||Z||_F ||Y||_F)`` over all entries at once."""
    nz = np.linalg.norm(Z)
    ny = np.linalg.norm(Y)
    if nz == 0 or ny == 0 or not np.isfinite(ny):
        raise DegenerateLoss("cosine loss undefined for a zero block")
    return float(1.0 - np.vdot(Z, Y) / (nz * ny))


def cosine_loss_grad(Z, Y):
    """Gradient of :func:`cosine_loss` with respect to ``Y``."""
    nz = np.linalg.norm(Z)
    ny = np.linalg.norm(Y)
    if nz == 0 or ny == 0:
        raise DegenerateLoss("cosine loss undefined for a zero block")
    c = np.vdot(Z, Y)
    return -(Z / (nz * ny) - c * Y / (nz * ny**3))


def projector_gap(u, v):
    """``0.5 * ||P_u - P_v||_F^2`` for the rank-one projectors onto span(u), span(v)."""
    u = np.ravel(u) / np.linalg.norm(u)
    v = np.ravel(v) / np.linalg.norm(v)
    D = np.outer(u, u) - np.outer(v, v)
    return 0.5 * float(np.sum(D * D))


def power_norm(A, steps=50, tol=1e-6, stream=None):
    """Spectral-norm estimate of symmetric ``A`` by power iteration."""
    stream = stream or RngStream(0, purpose="power")
    x = sample_normal(stream, A.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(steps):
        y = spmv(A, x)
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        x = y / new
        if abs(new - lam) <= tol * new:
            lam = new
            break
        lam = new
    return lam


def sai_loss(A, apply_fn, Z, normA):
    """``||(1/normA) A M Z - Z||_F^2``."""
    if not normA > 0:
        raise ConfigError("normA must be positive")
    W = apply_fn(Z)
    R = spmv(A, W) / normA - Z
    return float(np.sum(R * R))


def loss_and_grad(factors, A, Z, loss="cosine", normA=None, dinv=None):
    """Loss value and gradient (a float64 FactorTensor) for one probe block."""
    if dinv is None:
        dinv = 1.0 / check_positive_diagonal(A)
    if loss == "cosine":
        X = spmv(A, Z)
        Y, cache = forward_cached(factors, dinv, X)
        value = cosine_loss(Z, Y)
        G = cosine_loss_grad(Z, Y)
    elif loss == "sai":
        if normA is None:
            normA = power_norm(A)
        W, cache = forward_cached(factors, dinv, Z)
        R = spmv(A, W) / normA - Z
        value = float(np.sum(R * R))
        G = (2.0 / normA) * spmv(A, R)
    else:
        raise ConfigError(f"unknown loss {loss!r}")
    return value, backward(factors, dinv, cache, G)


def _loss_value(factors, A, Z, loss, normA, dinv):
    if loss == "cosine":
        return cosine_loss(Z, forward_cached(factors, dinv, spmv(A, Z))[0])
    W = forward_cached(factors, dinv, Z)[0]
    R = spmv(A, W) / normA - Z
    return float(np.sum(R * R))


def loss_gradient(factors, A, Z, loss="cosine", normA=None):
    """Gradient only; a degenerate loss yields a zero gradient."""
    try:
        return loss_and_grad(factors, A, Z, loss, normA)[1]
    except DegenerateLoss:
        return FactorTensor(factors.partition, factors.L_s, np.zeros_like(factors.data, dtype=np.float64))


# -- optimizer and schedule ---------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay (PyTorch update order)."""

    def __init__(self, size, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params, grad, lr):
        self.t += 1
        params *= 1.0 - lr * self.wd
        self.m += (1.0 - self.b1) * (grad - self.m)
        self.v *= self.b2
        self.v += (1.0 - self.b2) * grad * grad
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        denom = np.sqrt(self.v) / math.sqrt(bc2) + self.eps
        params -= (lr / bc1) * self.m / denom
        return params


class PlateauSchedule:
    """Reduce-on-plateau for a minimized metric, relative threshold mode."""

    def __init__(self, lr, factor=0.5, patience=5, threshold=5e-3, min_lr=0.0):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.bad = 0

    def step(self, metric):
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
        if self.bad > self.patience:
            new = max(self.lr * self.factor, self.min_lr)
            if self.lr - new > 1e-12:
                self.lr = new
            self.bad = 0
        return self.lr


def clip_global_norm(grad, max_norm):
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        grad *= max_norm / (norm + 1e-6)
    return norm


# -- training loop ------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_threshold: float = 5e-3
    min_lr: float | None = None
    max_steps: int = 100_000
    log_every: int = 100
    autostop_window: int = 10
    omega: float = 0.6
    smoothing_steps: int = 2
    contexts: int = 4
    loss: str = "cosine"
    n_probes: int | None = None
    eval_every: int = 1
    init: str = "jacobi_seed"
    init_sigma: float = 1e-2
    target_iters: int | None = None
    divergence_loss: float = 1.9
    divergence_window: int = 20
    eval_max_iters: int = 20000

    def __post_init__(self):
        if self.loss not in ("cosine", "sai"):
            raise ConfigError(f"loss must be 'cosine' or 'sai', got {self.loss!r}")
        for name in ("lr", "grad_clip", "plateau_factor", "max_steps", "log_every", "contexts"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def resolved_min_lr(self):
        return self.min_lr if self.min_lr is not None else max(self.lr * 1e-3, 1e-6)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    stop_reason: str | None = None
    steps: int = 0

    def append(self, **rec):
        self.records.append(rec)

    def column(self, key):
        return [r.get(key) for r in self.records]

    def to_jsonl(self):
        return "\n".join(json.dumps(r) for r in self.records) + ("\n" if self.records else "")


def evaluate_factors(factors, frame_A, b, rtol=1e-8, max_iters=20000):
    """PCG iteration count with the single-precision apply."""
    from .estimators import factor_applier
    from .pcg import SolveConfig, pcg_solve

    _, rep = pcg_solve(frame_A, b, factor_applier(factors.astype("single"), frame_A.diagonal()),
                       SolveConfig(rtol=rtol, max_iters=max_iters))
    return rep


def train_factors(operators, partition, L_s, cfg=None, stream=None, init=None,
                  eval_operator=None, eval_rhs=None, callback=None):
    """Fit a factor tensor to one or more operators sharing a partition.

    Each step averages gradients over ``cfg.contexts`` draws of (operator,
    fresh smoothed probe block). Returns ``(factors, history)``; the factors
    are float64.
    """
    cfg = cfg or TrainConfig()
    stream = stream or RngStream(0, purpose="train")
    if not isinstance(operators, (list, tuple)):
        operators = [operators]
    for A in operators:
        if A.shape[0] != partition.N:
            raise ConfigError("operator size does not match partition")
    dinvs = [1.0 / check_positive_diagonal(A) for A in operators]
    norms = [power_norm(A) for A in operators] if cfg.loss == "sai" else [None] * len(operators)
    if eval_operator is None:
        eval_operator = operators[0]
    eval_norm = power_norm(eval_operator)

    if init is None:
        init = init_factors(partition, L_s, cfg.init, cfg.init_sigma,
                            stream.child(purpose="init"), precision="double")
    factors = init.astype("double")
    opt = AdamW(factors.data.size, weight_decay=cfg.weight_decay)
    sched = PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience,
                            cfg.plateau_threshold, cfg.resolved_min_lr)
    hist = TrainHistory()
    pick = stream.child(purpose="contexts").generator()
    probe_stream = stream.child(purpose="probes")
    k = cfg.n_probes

    # step-0 record: loss and held-out metrics of the initial factors
    init_losses = []
    for c in range(cfg.contexts):
        A = operators[c % len(operators)]
        pb = smoothed_batch(A, probe_stream.child(frame=c % len(operators), counter=c),
                            k, cfg.omega, cfg.smoothing_steps)
        try:
            init_losses.append(_loss_value(factors, A, pb.Z, cfg.loss, norms[c % len(operators)],
                                           dinvs[c % len(operators)]))
        except DegenerateLoss:
            pass
    rec = {"step": 0, "loss": float(np.mean(init_losses)) if init_losses else math.nan,
           "lr": cfg.lr, "wall_time": 0.0}
    if cfg.eval_every:
        rec.update(_held_out_metrics(factors, eval_operator, eval_rhs, eval_norm,
                                     stream.child(purpose="eval"), cfg.eval_max_iters))
    hist.append(**rec)
    if callback is not None:
        callback(rec)

    window = []
    best_metric = math.inf
    stale = 0
    high = 0
    t0 = time.perf_counter()
    grad = np.zeros_like(factors.data)
    for step in range(1, cfg.max_steps + 1):
        grad[...] = 0.0
        n_ok = 0
        losses = []
        for c in range(cfg.contexts):
            j = int(pick.integers(len(operators))) if len(operators) > 1 else 0
            A = operators[j]
            pb = smoothed_batch(A, probe_stream.child(frame=j, counter=step * cfg.contexts + c),
                                k, cfg.omega, cfg.smoothing_steps)
            try:
                val, g = loss_and_grad(factors, A, pb.Z, cfg.loss, norms[j], dinvs[j])
            except DegenerateLoss:
                continue
            grad += g.data
            losses.append(val)
            n_ok += 1
        if n_ok:
            grad /= n_ok
            clip_global_norm(grad, cfg.grad_clip)
            opt.step(factors.data, grad, sched.lr)
            window.append(float(np.mean(losses)))
        hist.steps = step

        if step % cfg.log_every:
            continue
        log_idx = step // cfg.log_every
        mean_loss = float(np.mean(window)) if window else math.nan
        window = []
        rec = {"step": step, "loss": mean_loss, "lr": sched.lr,
               "wall_time": time.perf_counter() - t0}
        if cfg.eval_every and log_idx % cfg.eval_every == 0:
            rec.update(_held_out_metrics(factors, eval_operator, eval_rhs, eval_norm,
                                         stream.child(purpose="eval"), cfg.eval_max_iters))
        hist.append(**rec)
        if callback is not None:
            callback(rec)

        metric = mean_loss
        sched.step(metric)
        if metric < best_metric * (1.0 - cfg.plateau_threshold):
            best_metric = metric
            stale = 0
        else:
            stale += 1
        high = high + 1 if cfg.loss == "cosine" and mean_loss > cfg.divergence_loss else 0

        if cfg.target_iters is not None and rec.get("pcg_iters") is not None \
                and rec["pcg_iters"] <= cfg.target_iters and rec.get("converged"):
            hist.stop_reason = "target"
            break
        if high >= cfg.divergence_window:
            hist.stop_reason = "diverged"
            break
        if sched.lr <= cfg.resolved_min_lr * (1 + 1e-9) and stale >= cfg.autostop_window:
            hist.stop_reason = "autostop"
            break
    else:
        hist.stop_reason = "max_steps"
    factors.metadata["train"] = {"config": asdict(cfg), "steps": hist.steps,
                                 "stop_reason": hist.stop_reason}
    return factors, hist


def _held_out_metrics(factors, A, b, normA, stream, max_iters=20000):
    from .factors import apply

    out = {}
    Z = smoothed_batch(A, stream, k=8).Z
    try:
        out["sai_loss"] = sai_loss(A, lambda V: apply(factors, A.diagonal(), V), Z, normA) / Z.shape[1]
    except FloatingPointError:
        out["sai_loss"] = math.nan
    if b is not None:
        rep = evaluate_factors(factors, A, b, max_iters=max_iters)
        out["pcg_iters"] = rep.iterations
        out["converged"] = rep.converged
    return out
