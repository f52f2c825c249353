import json

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from htprecond.pcg import (
    Applier,
    SolveConfig,
    ic0_applier,
    ic0_factorize,
    identity_applier,
    jacobi_applier,
    pcg_solve,
)
from htprecond.validation import ConfigError, ContractError, NumericalError


def test_identity_one_iteration(rng):
    _, rep = pcg_solve(sp.identity(10, format="csr"), rng.standard_normal(10))
    assert rep.converged and rep.iterations == 1 and rep.method == "none"


def test_diagonal_jacobi_one_iteration(rng):
    A = sp.diags(rng.random(20) * 10 + 1, format="csr")
    x, rep = pcg_solve(A, rng.standard_normal(20), jacobi_applier(A))
    assert rep.converged and rep.iterations == 1 and rep.method == "jacobi"


@given(st.sampled_from([1, 3, 5, 10]), st.integers(0, 10_000))
def test_finite_termination(c, seed):
    g = np.random.default_rng(seed)
    # spread kept moderate: exact termination degrades with kappa in floating point
    eig = g.uniform(1.0, 50.0, size=c)
    A = sp.diags(np.repeat(eig, 4), format="csr")
    _, rep = pcg_solve(A, g.standard_normal(4 * c), cfg=SolveConfig(rtol=1e-12))
    assert rep.converged and rep.iterations <= c


def test_jacobi_values():
    A = sp.diags([2.0, 4.0], format="csr")
    np.testing.assert_allclose(jacobi_applier(A)(np.array([2.0, 4.0])), [1.0, 1.0])
    with pytest.raises(ContractError):
        jacobi_applier(sp.diags([1.0, 0.0], format="csr"))


def test_ic0_exact_on_tridiagonal(rng):
    n = 30
    A = sp.diags([-np.ones(n - 1), 4 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
    L = ic0_factorize(A, shift=0.0)
    np.testing.assert_allclose((L @ L.T).toarray(), A.toarray(), atol=1e-12)
    np.testing.assert_allclose(L.toarray(), np.linalg.cholesky(A.toarray()), atol=1e-12)
    _, rep = pcg_solve(A, rng.standard_normal(n), ic0_applier(L))
    assert rep.converged and rep.iterations == 1


def test_ic0_pattern_subset(frame256):
    A = frame256.A
    L = ic0_factorize(A)
    lower = sp.tril(A, format="csr")
    pat_L = set(zip(*L.nonzero()))
    pat_A = set(zip(*lower.nonzero()))
    assert pat_L <= pat_A


def test_ic0_failure():
    with pytest.raises(NumericalError):
        ic0_factorize(sp.csr_matrix(np.array([[1.0, 2.0], [2.0, 1.0]])))


def test_baseline_ordering(frame1024):
    A, b = frame1024.A, frame1024.b
    its = {}
    for name, pre in (("none", identity_applier()), ("jacobi", jacobi_applier(A)),
                      ("ic0", ic0_applier(ic0_factorize(A)))):
        _, rep = pcg_solve(A, b, pre)
        assert rep.converged
        its[name] = rep.iterations
    assert its["none"] > its["jacobi"] > its["ic0"]


def test_residual_consistency_and_semantics(frame256):
    A, b = frame256.A, frame256.b
    cfg = SolveConfig(rtol=1e-8)
    x, rep = pcg_solve(A, b, jacobi_applier(A), cfg)
    assert rep.converged
    h = rep.residual_history
    assert len(h) == rep.iterations + 1 and h[0] == 1.0
    assert h[-1] <= cfg.rtol and all(v > cfg.rtol for v in h[:-1])
    true_res = np.linalg.norm(b - A @ x)
    assert abs(true_res - h[-1] * np.linalg.norm(b)) <= 1e-6 * np.linalg.norm(b)


def test_determinism(frame256):
    A, b = frame256.A, frame256.b
    _, r1 = pcg_solve(A, b, jacobi_applier(A))
    _, r2 = pcg_solve(A, b, jacobi_applier(A))
    assert r1.iterations == r2.iterations and r1.residual_history == r2.residual_history


def test_breakdown_reported():
    A = sp.diags([1.0, -2.0], format="csr")
    _, rep = pcg_solve(A, np.array([1.0, 1.0]))
    assert rep.breakdown and rep.breakdown_iter == 1 and not rep.converged


def test_zero_rhs():
    x, rep = pcg_solve(sp.identity(4, format="csr"), np.zeros(4))
    assert rep.converged and rep.iterations == 0 and np.all(x == 0)


def test_max_iters_and_record(frame256):
    A, b = frame256.A, frame256.b
    _, rep = pcg_solve(A, b, cfg=SolveConfig(max_iters=5, record_residuals=True))
    assert rep.iterations == 5 and not rep.converged
    assert len(rep.residual_vectors) == 6
    assert np.linalg.norm(rep.residual_vectors[3]) == pytest.approx(
        rep.residual_history[3] * np.linalg.norm(b))


def test_report_json(frame256):
    _, rep = pcg_solve(frame256.A, frame256.b, frame_id="f0")
    d = json.loads(rep.to_json())
    assert d["frame_id"] == "f0" and d["N"] == 256 and "residual_vectors" not in d


def test_config_and_contract():
    with pytest.raises(ConfigError):
        SolveConfig(rtol=0)
    with pytest.raises(ConfigError):
        SolveConfig(max_iters=0)
    with pytest.raises(ContractError):
        pcg_solve(sp.identity(3, format="csr"), np.ones(4))


def test_custom_applier_tag(rng):
    A = sp.identity(5, format="csr")
    _, rep = pcg_solve(A, rng.standard_normal(5), Applier(lambda r: r, "mine"))
    assert rep.method == "mine"
