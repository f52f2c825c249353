"""Acceptance criteria 1-13, one test each.

Every test records a ``[PASS]``/``[FAIL]`` line (printed immediately and again
in the terminal summary) with the measured quantities.
"""

import contextlib
import math
import time

import numpy as np
import pytest
import scipy.sparse as sp

from htprecond.analysis import rank_audit
from htprecond.bench import generate_frame
from htprecond.factors import apply, assemble_dense, init_factors
from htprecond.linalg import RngStream
from htprecond.partition import build_partition, effective_leaf_size, packed_width
from htprecond.pcg import SolveConfig, ic0_applier, ic0_factorize, jacobi_applier, pcg_solve
from htprecond.toy_network import (
    ForwardTrace,
    ToyNetConfig,
    forward,
    highway_conservation_check,
    init_weights,
)
from htprecond.training import (
    TrainConfig,
    cosine_loss,
    evaluate_factors,
    loss_and_grad,
    power_norm,
    probe_count,
    projector_gap,
    sai_loss,
    sample_probes,
    smooth_probes,
    smoothed_batch,
    train_factors,
)
from tests.conftest import ACCEPTANCE


@contextlib.contextmanager
def criterion(n, title):
    info = {}
    t0 = time.perf_counter()
    ok = False
    try:
        yield info
        ok = True
    finally:
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        line = (f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {title} "
                f"({time.perf_counter() - t0:.1f}s){': ' + detail if detail else ''}")
        ACCEPTANCE[n] = line
        print(line)


def test_c01_partition_counts():
    with criterion(1, "partition tile counts") as info:
        for K in (2, 4, 8, 16, 32, 64, 128, 256):
            p = build_partition(K * 16, 16)
            assert p.K == K and p.M == K - 1 == len(p.tiles)
        info["K_max"] = 256


def test_c02_packed_width():
    want = {1024: 204800, 2048: 410624, 8192: 1645568, 16384: 3292160}
    with criterion(2, "packed width") as info:
        got = {N: packed_width(build_partition(N, 128), 32) for N in want}
        info.update({f"P{N}": v for N, v in got.items()})
        assert got == want


def test_c03_apply_vs_dense():
    with criterion(3, "apply vs dense oracle") as info:
        worst = {"single": 0.0, "double": 0.0}
        g = np.random.default_rng(0)
        for N in (256, 512, 1024):
            part = build_partition(N, effective_leaf_size(N, 128))
            d = generate_frame(N, 3, 0, "test").A.diagonal()
            for t in range(20):
                base = init_factors(part, 32, "random", 0.1, RngStream(t, frame=N), "double")
                for prec in ("single", "double"):
                    ft = base.astype(prec)
                    D = assemble_dense(ft, d)
                    r = g.standard_normal(N)
                    ref = D @ r
                    err = np.linalg.norm(apply(ft, d, r) - ref) / np.linalg.norm(ref)
                    worst[prec] = max(worst[prec], err)
        info.update(single=f"{worst['single']:.2e}", double=f"{worst['double']:.2e}")
        assert worst["single"] <= 1e-5 and worst["double"] <= 1e-12


def test_c04_cosine_laws():
    with criterion(4, "cosine loss laws") as info:
        g = np.random.default_rng(1)
        Z = g.standard_normal((1024, 16))
        errs = [abs(cosine_loss(Z, Z)), abs(cosine_loss(Z, -Z) - 2.0)]
        errs += [abs(cosine_loss(Z, a * Z)) for a in (1e-3, 1.0, 1e3)]
        info["loss_err"] = f"{max(errs):.1e}"
        assert max(errs) <= 1e-10
        proj = 0.0
        for _ in range(200):
            u, v = g.standard_normal(64), g.standard_normal(64)
            cos = u @ v / np.linalg.norm(u) / np.linalg.norm(v)
            proj = max(proj, abs(projector_gap(u, v) - (1 - cos**2)))
        info["proj_err"] = f"{proj:.1e}"
        assert proj <= 1e-12
        fr = generate_frame(256, 1, 0, "test")
        ft = init_factors(build_partition(256, 128), 32, "random", 0.05, RngStream(0), "double")
        d, nA = fr.A.diagonal(), power_norm(fr.A)
        s1 = sai_loss(fr.A, lambda V: apply(ft, d, V), Z[:256], nA)
        s2 = sai_loss(fr.A, lambda V: apply(ft.scaled(2.0), d, V), Z[:256], nA)
        info["sai_change"] = f"{abs(s2 - s1):.3g}"
        assert abs(s2 - s1) > 1e-6 * abs(s1)


def test_c05_gradient_fd():
    with criterion(5, "adjoint gradient vs finite differences") as info:
        fr = generate_frame(256, 7, 0, "test")
        A = fr.A
        ft = init_factors(build_partition(256, 128), 32, "random", 0.05, RngStream(2), "double")
        Z = smoothed_batch(A, RngStream(4), k=8).Z
        nA = power_norm(A)
        idx = np.random.default_rng(0).choice(ft.data.size, 50, replace=False)
        h = 1e-6
        for loss in ("cosine", "sai"):
            _, g = loss_and_grad(ft, A, Z, loss, nA)
            fd = np.empty(50)
            for i, j in enumerate(idx):
                p, m = ft.copy(), ft.copy()
                p.data[j] += h
                m.data[j] -= h
                fd[i] = (loss_and_grad(p, A, Z, loss, nA)[0]
                         - loss_and_grad(m, A, Z, loss, nA)[0]) / (2 * h)
            rel = np.linalg.norm(g.data[idx] - fd) / np.linalg.norm(fd)
            info[loss] = f"{rel:.1e}"
            assert rel <= 1e-4


def test_c06_probes():
    with criterion(6, "probe count, smoothing, whiteness") as info:
        assert [probe_count(N) for N in (1024, 4096, 16384)] == [64, 64, 128]
        # 16x16 path-graph Laplacian with random positive weights
        g = np.random.default_rng(0)
        w = g.random(15) + 0.5
        A = sp.diags([-w, np.r_[w, 0] + np.r_[0, w], -w], [-1, 0, 1], format="csr")
        d = A.diagonal()
        mu, V = np.linalg.eigh(np.diag(d**-0.5) @ A.toarray() @ np.diag(d**-0.5))
        err = 0.0
        for i in range(16):
            z = V[:, i] / np.sqrt(d)
            got = smooth_probes(A, z, 0.6, 2)
            err = max(err, np.abs(got - (1 - 0.6 * mu[i]) ** 2 * z).max() / np.abs(z).max())
        info["damping_err"] = f"{err:.1e}"
        assert err <= 1e-10
        Z = sample_probes(1024, RngStream(5), k=8192).Z
        m2 = np.mean(Z**2, axis=1)
        info["second_moment"] = f"[{m2.min():.3f}, {m2.max():.3f}]"
        assert m2.min() >= 0.9 and m2.max() <= 1.1


def test_c07_cg_finite_termination():
    with criterion(7, "CG finite termination") as info:
        worst = {}
        for c in (1, 3, 5, 10):
            for seed in range(20):
                g = np.random.default_rng(seed)
                eig = g.uniform(1.0, 50.0, size=c)
                A = sp.diags(np.repeat(eig, 5), format="csr")
                _, rep = pcg_solve(A, g.standard_normal(5 * c), cfg=SolveConfig(rtol=1e-12))
                assert rep.converged
                worst[c] = max(worst.get(c, 0), rep.iterations)
        info["max_iters"] = worst
        assert all(worst[c] <= c for c in worst)


def test_c08_benchmark_validity():
    with criterion(8, "benchmark frame validity") as info:
        g = np.random.default_rng(0)
        checked = 0
        for i in range(50):
            fr = generate_frame(1024, 0, i, "train")
            A = fr.A
            assert abs(A - A.T).nnz == 0
            assert np.abs(A @ np.ones(1024)).max() <= 1e-12 * sp.linalg.norm(A)
            assert abs(fr.b.sum()) <= 1e-10 * np.linalg.norm(fr.b)
            ev = np.linalg.eigvalsh(A.toarray())
            assert np.count_nonzero(np.abs(ev) <= 1e-10 * ev[-1]) == 1
            C = A.tocoo()
            off = np.flatnonzero(C.row != C.col)
            xy = fr.coords
            for e in g.choice(off, 20, replace=False):
                i_, j_ = C.row[e], C.col[e]
                assert np.abs(xy[i_] - xy[j_]).sum() == 1  # grid neighbors only
                ri, rj = fr.rho[i_], fr.rho[j_]
                assert -C.data[e] == pytest.approx(2 * ri * rj / (ri + rj), rel=1e-13)
                checked += 1
        info.update(frames=50, conductances=checked)


def _iters(A, b, precond):
    _, rep = pcg_solve(A, b, precond, SolveConfig(rtol=1e-8, max_iters=20000))
    assert rep.converged
    return rep.iterations


def test_c09_baseline_ordering():
    with criterion(9, "baseline ordering none > Jacobi > IC(0)") as info:
        none, jac, ic0 = [], [], []
        for i in range(20):
            fr = generate_frame(1024, 0, i, "test")
            none.append(_iters(fr.A, fr.b, None))
            jac.append(_iters(fr.A, fr.b, jacobi_applier(fr.A)))
            ic0.append(_iters(fr.A, fr.b, ic0_applier(ic0_factorize(fr.A))))
        none, jac, ic0 = map(np.array, (none, jac, ic0))
        f1, f2 = np.mean(none > jac), np.mean(jac > ic0)
        info.update(means=f"{none.mean():.0f} > {jac.mean():.0f} > {ic0.mean():.0f}",
                    strict_fraction=f"{f1:.2f}/{f2:.2f}")
        assert none.mean() > jac.mean() > ic0.mean()
        assert f1 >= 0.8 and f2 >= 0.8


TRAIN_FRAME = (1024, 7, 0, "test")


@pytest.mark.slow
def test_c10_training_efficacy():
    with criterion(10, "cosine training reaches half the Jacobi count") as info:
        fr = generate_frame(*TRAIN_FRAME)
        jac = _iters(fr.A, fr.b, jacobi_applier(fr.A))
        target = math.floor(0.5 * jac)
        cfg = TrainConfig(max_steps=20000, target_iters=target, eval_max_iters=3000)
        part = build_partition(1024, 128)
        ft, hist = train_factors(fr.A, part, 32, cfg, RngStream(0), eval_rhs=fr.b)
        final = evaluate_factors(ft, fr.A, fr.b)
        info.update(jacobi=jac, target=target, steps=hist.steps, stop=hist.stop_reason,
                    hfactor=final.iterations, loss0=f"{hist.records[0]['loss']:.3f}",
                    loss=f"{hist.records[-1]['loss']:.3f}")
        assert final.converged and final.iterations <= target


@pytest.mark.slow
def test_c11_loss_ablation():
    with criterion(11, "cosine beats SAI under identical setup") as info:
        fr = generate_frame(*TRAIN_FRAME)
        part = build_partition(1024, 128)
        wins, detail = 0, []
        for seed in range(3):
            res = {}
            for loss in ("cosine", "sai"):
                cfg = TrainConfig(max_steps=1500, loss=loss, eval_every=0)
                ft, _ = train_factors(fr.A, part, 32, cfg, RngStream(seed), eval_rhs=fr.b)
                rep = evaluate_factors(ft, fr.A, fr.b, max_iters=5000)
                # a failed solve counts as the iteration cap
                res[loss] = rep.iterations if rep.converged else math.inf
            detail.append(f"{res['cosine']}/{res['sai']}")
            wins += res["cosine"] < res["sai"]
        info.update(cosine_vs_sai=" ".join(detail), wins=wins)
        assert wins >= 2


def test_c12_rank_audit():
    with criterion(12, "rank audit") as info:
        ops = [generate_frame(1024, 0, i, "test").A for i in range(10)]
        rep = rank_audit(ops, build_partition(1024, 128), eps=(1e-3,), L_s=32)
        req = [rep.required_mean[(S, 1e-3)] for S in rep.spans]
        prov = [rep.provided[S] for S in rep.spans]
        info.update(spans=rep.spans, required=[round(r, 4) for r in req], provided=prov)
        assert all(a >= b for a, b in zip(req, req[1:]))
        assert all(p > r for p, r in zip(prov, req))


def test_c13_toy_network():
    with criterion(13, "toy network structure") as info:
        fr = generate_frame(1024, 0, 0, "test")
        cfg = ToyNetConfig()
        part = build_partition(1024, cfg.L)
        trace = ForwardTrace()
        ft = forward(fr, part, cfg, init_weights(cfg, 0), trace)
        cons = highway_conservation_check(trace)
        info.update(width=ft.data.size, rowsum_err=f"{trace.max_rowsum_err:.1e}",
                    conservation=f"{cons:.1e}", families=sorted(trace.dispatch))
        assert ft.data.size == packed_width(part, cfg.L_s)
        assert trace.max_rowsum_err <= 1e-6
        assert cons <= 1e-5
        assert set(trace.dispatch) == {"leaf", "tile"}
