import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from htprecond.analysis import (
    RANK_COLUMNS,
    SUMMARY_COLUMNS,
    aggregate_reports,
    deflation_basis,
    precond_spectrum,
    pseudo_inverse,
    rank_audit,
    required_rank,
    rows_to_csv,
    rows_to_json,
)
from htprecond.partition import build_partition
from htprecond.validation import ContractError
from tests.conftest import cached_frame


def test_deflation_basis_orthonormal():
    Q = deflation_basis(50)
    np.testing.assert_allclose(Q.T @ Q, np.eye(49), atol=1e-13)
    np.testing.assert_allclose(Q.T @ np.ones(50), 0, atol=1e-13)


def test_pseudo_inverse_gives_unit_spectrum():
    A = cached_frame(256).A
    rep = precond_spectrum(A, pseudo_inverse(A), method="exact")
    assert rep.kappa == pytest.approx(1.0, abs=1e-8)
    assert rep.neg_count == 0
    assert rep.kappa_reduction == pytest.approx(rep.kappa_unpreconditioned, rel=1e-8)


def test_pseudo_inverse_matches_pinv():
    A = cached_frame(256).A
    np.testing.assert_allclose(pseudo_inverse(A), np.linalg.pinv(A.toarray()), atol=1e-8)


def test_diagonal_with_jacobi():
    d = np.linspace(1, 5, 30)
    rep = precond_spectrum(sp.diags(d), lambda v: v / d, deflate=False)
    np.testing.assert_allclose(rep.eigenvalues, 1.0, atol=1e-12)


def test_callable_matches_array():
    A = cached_frame(256).A
    d = A.diagonal()
    r1 = precond_spectrum(A, np.diag(1 / d))
    r2 = precond_spectrum(A, lambda v: v / d)
    np.testing.assert_allclose(r1.eigenvalues, r2.eigenvalues, rtol=1e-12)
    assert r1.kappa < r1.kappa_unpreconditioned * 1.01


def test_negative_count():
    A = cached_frame(256).A
    rep = precond_spectrum(A, -np.eye(256))
    assert rep.neg_count == 255


def test_dense_cap():
    with pytest.raises(ContractError):
        precond_spectrum(sp.identity(100), cap=50)


@given(st.integers(0, 10_000), st.sampled_from([1e-1, 1e-3, 1e-6]))
def test_required_rank_is_minimal(seed, eps):
    sv = np.sort(np.random.default_rng(seed).exponential(size=30))[::-1]
    r = required_rank(sv, eps)
    tail = lambda k: np.sqrt(np.sum(sv[k:] ** 2) / np.sum(sv**2))
    assert tail(r) <= eps
    if r > 0:
        assert tail(r - 1) > eps


def test_required_rank_edges():
    assert required_rank(np.zeros(5), 1e-3) == 0
    assert required_rank(np.array([1.0, 0, 0]), 1e-9) == 1


def test_identity_without_deflation_has_zero_tile_rank():
    rep = rank_audit(sp.identity(64, format="csr"), build_partition(64, 16), deflate=False, L_s=4)
    for k, v in rep.required_mean.items():
        assert v == 0.0


def test_provided_fractions_and_rows():
    part = build_partition(256, 32)
    rep = rank_audit(cached_frame(256).A, part, L_s=8)
    assert rep.spans == [1, 2, 4]
    assert rep.provided == {1: 0.25, 2: 0.125, 4: 0.0625}
    rows = rep.rows()
    assert len(rows) == 9 and list(rows[0]) == list(RANK_COLUMNS)
    # tighter tolerance needs at least as much rank
    for S in rep.spans:
        m = [rep.required_mean[(S, e)] for e in rep.eps]
        assert m == sorted(m)


def test_aggregate_population_std():
    reps = [{"method": "jacobi", "N": 64, "iterations": i, "wall_time": 0.001, "converged": True}
            for i in (10, 20, 30)]
    reps.append({"method": "none", "N": 64, "iterations": 5, "wall_time": 0.002, "converged": False})
    rows = aggregate_reports(reps)
    j = next(r for r in rows if r["method"] == "jacobi")
    assert j["iters_mean"] == 20 and j["iters_std"] == pytest.approx(8.16496580927726)
    assert j["wall_ms_mean"] == pytest.approx(1.0) and j["failures"] == 0
    assert next(r for r in rows if r["method"] == "none")["failures"] == 1


def test_csv_column_order(tmp_path):
    rows = [{"failures": 0, "method": "x", "N": 1, "iters_mean": 1.0, "iters_std": 0.0,
             "wall_ms_mean": 2.0, "iters_min": 1, "iters_max": 1, "n_frames": 1, "extra": 9}]
    text = rows_to_csv(rows, SUMMARY_COLUMNS, tmp_path / "s.csv")
    assert text.splitlines()[0] == ",".join(SUMMARY_COLUMNS)
    assert (tmp_path / "s.csv").read_text() == text


def test_json_numpy_values():
    assert '"a": 3' in rows_to_json([{"a": np.int64(3)}])
