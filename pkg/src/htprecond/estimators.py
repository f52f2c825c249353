"""scikit-learn style preconditioner estimators.

Each estimator is fit on a sparse SPD operator ``A`` and then maps residuals
to preconditioned residuals. ``transform`` takes residuals as rows
(``(n_vectors, N)``), matching the sklearn sample-major convention; ``apply``
takes a single vector or an ``(N, k)`` column block.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse.linalg import LinearOperator
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .factors import ApplyWorkspace, FactorTensor, apply, assemble_dense
from .linalg import RngStream
from .partition import build_partition, effective_leaf_size
from .pcg import Applier, ic0_applier, ic0_factorize, jacobi_applier
from .validation import ContractError, check_csr, check_positive_diagonal, check_symmetric


def factor_applier(factors, a_diag):
    """PCG applier with one reusable workspace (single right-hand side)."""
    ws = ApplyWorkspace(factors.partition, factors.L_s, 1, factors.precision)
    a_diag = np.asarray(a_diag, dtype=ws.dinv.dtype)

    def fn(r):
        return apply(factors, a_diag, r, ws)

    return Applier(fn, "hfactor")


class PreconditionerMixin:
    """``apply`` / ``transform`` / ``as_linear_operator`` on top of ``_applier``."""

    def _check_operator(self, A):
        A = check_csr(A)
        check_symmetric(A, rtol=1e-12)
        return A

    def apply(self, r):
        check_is_fitted(self, "n_features_in_")
        r = np.asarray(r, dtype=np.float64)
        if r.shape[0] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} rows, got {r.shape[0]}")
        if r.ndim == 1:
            return np.asarray(self._applier(r), dtype=np.float64)
        return np.stack([self._applier(c) for c in r.T], axis=1)

    def transform(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return self.apply(X.T).T

    def fit_transform(self, A, X):
        return self.fit(A).transform(X)

    def as_linear_operator(self):
        check_is_fitted(self, "n_features_in_")
        n = self.n_features_in_
        return LinearOperator((n, n), matvec=self.apply, dtype=np.float64)

    def __call__(self, r):
        return self.apply(r)


class JacobiPreconditioner(PreconditionerMixin, BaseEstimator):
    def fit(self, A, y=None):
        A = self._check_operator(A)
        self.diag_ = check_positive_diagonal(A)
        self._applier = jacobi_applier(A)
        self.n_features_in_ = A.shape[0]
        return self


class IC0Preconditioner(PreconditionerMixin, BaseEstimator):
    """Zero-fill incomplete Cholesky of ``A + shift * max(diag A) I``."""

    def __init__(self, shift=1e-8):
        self.shift = shift

    def fit(self, A, y=None):
        A = self._check_operator(A)
        self.factor_ = ic0_factorize(A, self.shift)
        self._applier = ic0_applier(self.factor_)
        self.n_features_in_ = A.shape[0]
        return self


class HierarchicalPreconditioner(PreconditionerMixin, BaseEstimator):
    """Hierarchical factorized approximate inverse fit by probe-based training.

    Parameters mirror :class:`htprecond.training.TrainConfig`; ``fit`` runs the
    cosine (or SAI) training loop on ``A`` and keeps the single-precision
    factors for solving.

    Parameters
    ----------
    leaf_size : int
        Leaf size L (clamped to N/2 for tiny systems).
    coarse_size : int
        Coarse token count L_s per tile; must divide the leaf size.
    loss : {"cosine", "sai"}
    max_steps, lr, ... : training hyperparameters.
    random_state : int
    """

    def __init__(self, leaf_size=128, coarse_size=32, loss="cosine", max_steps=20000, lr=2e-4,
                 weight_decay=1e-4, grad_clip=1.0, contexts=4, log_every=100, init="jacobi_seed",
                 init_sigma=1e-2, target_iters=None, eval_every=1, eval_max_iters=20000,
                 precision="single", random_state=0):
        self.leaf_size = leaf_size
        self.coarse_size = coarse_size
        self.loss = loss
        self.max_steps = max_steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.contexts = contexts
        self.log_every = log_every
        self.init = init
        self.init_sigma = init_sigma
        self.target_iters = target_iters
        self.eval_every = eval_every
        self.eval_max_iters = eval_max_iters
        self.precision = precision
        self.random_state = random_state

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, grad_clip=self.grad_clip,
                           max_steps=self.max_steps, log_every=self.log_every,
                           contexts=self.contexts, loss=self.loss, init=self.init,
                           init_sigma=self.init_sigma, target_iters=self.target_iters,
                           eval_every=self.eval_every, eval_max_iters=self.eval_max_iters)

    def fit(self, A, y=None, init=None, callback=None):
        """Train factors on ``A``; ``y`` (optional) is a right-hand side used
        to log held-out PCG iteration counts."""
        from .training import train_factors

        A = self._check_operator(A)
        N = A.shape[0]
        part = build_partition(N, effective_leaf_size(N, self.leaf_size))
        factors, hist = train_factors(A, part, self.coarse_size, self.train_config(),
                                      RngStream(self.random_state, purpose="train"), init=init,
                                      eval_rhs=y, callback=callback)
        self.history_ = hist
        return self._set_factors(factors.astype(self.precision), A)

    def set_factors(self, factors, A):
        """Use precomputed factors without training."""
        A = self._check_operator(A)
        if factors.N != A.shape[0]:
            raise ContractError("factors do not match operator size")
        return self._set_factors(factors.astype(self.precision), A)

    def _set_factors(self, factors, A):
        self.factors_ = factors
        self.partition_ = factors.partition
        self.diag_ = check_positive_diagonal(A)
        self._applier = factor_applier(factors, self.diag_)
        self.n_features_in_ = A.shape[0]
        return self

    def apply(self, r):
        check_is_fitted(self, "factors_")
        r = np.asarray(r, dtype=np.float64)
        if r.shape[0] != self.n_features_in_:
            raise ContractError(f"expected {self.n_features_in_} rows, got {r.shape[0]}")
        if r.ndim == 1:
            return self._applier(r)
        return apply(self.factors_, self.diag_, r)

    def assemble(self):
        check_is_fitted(self, "factors_")
        return assemble_dense(self.factors_, self.diag_)


def make_preconditioner(method, **kwargs):
    methods = {"jacobi": JacobiPreconditioner, "ic0": IC0Preconditioner,
               "hfactor": HierarchicalPreconditioner}
    if method not in methods:
        raise ValueError(f"unknown preconditioner {method!r}; choose from {sorted(methods)}")
    return methods[method](**kwargs)


__all__ = ["JacobiPreconditioner", "IC0Preconditioner", "HierarchicalPreconditioner",
           "FactorTensor", "factor_applier", "make_preconditioner"]
