"""Sparse Bayesian learning under a post-log Gaussian noise model.

EM iterations for ARD where the E-step solves ``P m = Phi^T B y~`` by
conjugate gradients and computes the diagonal of ``Psi P^{-1} Psi^T``. Here
``P = Phi^T B Phi + Psi^T diag(lam) Psi`` with ``lam`` the prior precisions,
``B = diag(y)`` and ``y~ = log(eta / y)``. The M-step sets
``lam = 1 / ((Psi m)^2 + diag)``.

Results report variances ``1/lam`` so they line up with the VARD ``gamma``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .projector import SystemMatrix
from .simulate import Sinogram, post_log
from .transforms import SparsifyingTransform

__all__ = ["SblConfig", "CgInfo", "SblResult", "cg_solve", "make_apply_P", "dense_P",
           "sbl_mean", "sbl_variance_diag", "run_sbl"]

PRECISION_FLOOR = 1e-30


@dataclass(frozen=True)
class SblConfig:
    eps_m: float = 1e-8
    eps_v: float = 1e-2
    max_cg_iters: int = 1000
    n_em_iters: int = 100
    variance_mode: str = "exact_small"
    gamma_init: float = 100.0

    def __post_init__(self):
        if self.eps_m <= 0 or self.eps_v <= 0:
            raise ValueError("CG thresholds must be positive")
        if self.variance_mode not in ("exact_small", "cg_columns"):
            raise ValueError(f"unknown variance_mode {self.variance_mode!r}")
        if self.gamma_init <= 0:
            raise ValueError("gamma_init must be positive")


@dataclass
class CgInfo:
    iterations: int
    residual: float
    converged: bool


@dataclass
class SblResult:
    m: np.ndarray
    m_raw: np.ndarray
    gamma: np.ndarray
    trace: list[dict]
    cg_failures: list[int] = field(default_factory=list)


def cg_solve(apply_P: Callable, rhs, threshold: float, max_iters: int, x0=None,
             relative: bool = False) -> tuple[np.ndarray, CgInfo]:
    """Conjugate gradients for a symmetric positive-definite operator.

    Stops when ``||rhs - P x|| <= threshold`` (times ``||rhs||`` if
    ``relative``). Non-convergence is reported in the returned info.
    """
    rhs = np.asarray(rhs, dtype=float)
    x = np.zeros_like(rhs) if x0 is None else np.array(x0, dtype=float)
    r = rhs - apply_P(x) if x0 is not None else rhs.copy()
    tol = threshold * (np.linalg.norm(rhs) if relative else 1.0)
    rr = float(r @ r)
    if np.sqrt(rr) <= tol:
        return x, CgInfo(0, np.sqrt(rr), True)
    d = r.copy()
    it = 0
    for it in range(1, max_iters + 1):
        Pd = apply_P(d)
        alpha = rr / float(d @ Pd)
        x += alpha * d
        r -= alpha * Pd
        rr_new = float(r @ r)
        if np.sqrt(rr_new) <= tol:
            return x, CgInfo(it, np.sqrt(rr_new), True)
        d = r + (rr_new / rr) * d
        rr = rr_new
    return x, CgInfo(it, np.sqrt(rr), False)


def make_apply_P(A: SystemMatrix, T: SparsifyingTransform, weights, precision) -> Callable:
    """``x -> Phi^T (w * Phi x) + Psi^T (lam * Psi x)`` from the projection primitives."""
    lam_rows = T.expand(precision)

    def apply_P(x):
        return A.back(weights * A.forward(x)) + T._t @ (lam_rows * (T.matrix @ x))

    return apply_P


def dense_P(A: SystemMatrix, T: SparsifyingTransform, weights, precision, G=None) -> np.ndarray:
    """Dense ``P``; pass ``G = Phi^T B Phi`` to reuse it across calls."""
    if G is None:
        G = (A._t @ A.matrix.multiply(weights[:, None]).tocsr()).toarray()
    M = T.matrix
    return G + (M.T @ M.multiply(T.expand(precision)[:, None]).tocsr()).toarray()


def sbl_mean(precision, A: SystemMatrix, T: SparsifyingTransform, y_tilde, weights,
             threshold: float = 1e-8, max_iters: int = 1000, x0=None):
    """Posterior mean solving ``P m = Phi^T B y~`` with CG (relative threshold)."""
    apply_P = make_apply_P(A, T, weights, precision)
    return cg_solve(apply_P, A.back(weights * y_tilde), threshold, max_iters, x0, relative=True)


def _cholesky(P):
    c, info = sla.lapack.dpotrf(P, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("P is not positive definite")
    return c


def _diag_from_factor(c, M):
    Pinv, info = sla.lapack.dpotri(c, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError("inversion of P failed")
    Pinv = np.tril(Pinv) + np.tril(Pinv, -1).T
    return np.asarray(M.multiply(M @ Pinv).sum(axis=1)).ravel()


def sbl_variance_diag(precision, A: SystemMatrix, T: SparsifyingTransform, weights,
                      mode: str = "exact_small", threshold: float = 1e-2,
                      max_iters: int = 1000, G=None):
    """Diagonal of ``Psi P^{-1} Psi^T``, one entry per transform row.

    ``exact_small`` factors the dense ``P`` and inverts it, which suits ``p``
    up to a few thousand; ``cg_columns`` solves ``P x_k = Psi_k^T`` by CG for
    every row ``k``. Returns the diagonal and the list of CG infos (empty for
    the dense mode).
    """
    M = T.matrix
    if mode == "exact_small":
        c = _cholesky(dense_P(A, T, weights, precision, G))
        return _diag_from_factor(c, M), []
    if mode == "cg_columns":
        apply_P = make_apply_P(A, T, weights, precision)
        Mt = M.T.tocsc()
        diag = np.empty(T.K)
        infos = []
        for k in range(T.K):
            col = Mt[:, k].toarray().ravel()
            x, info = cg_solve(apply_P, col, threshold, max_iters, relative=True)
            diag[k] = col @ x
            infos.append(info)
        return diag, infos
    raise ValueError(f"unknown variance mode {mode!r}")


def run_sbl(A: SystemMatrix, T: SparsifyingTransform, sino: Sinogram, config: SblConfig = SblConfig(),
            callback: Callable | None = None) -> SblResult:
    """EM iterations; the returned image is thresholded at zero."""
    if T.kind not in ("complete", "identity"):
        raise ValueError("SBL supports complete representations only")
    y_tilde, weights = post_log(sino)
    weights = np.asarray(weights, dtype=float)
    precision = np.full(T.n_slots, 1.0 / config.gamma_init)
    G = None
    if config.variance_mode == "exact_small":
        G = (A._t @ A.matrix.multiply(weights[:, None]).tocsr()).toarray()
    rhs = A.back(weights * y_tilde)

    def e_step(precision, m):
        if config.variance_mode == "exact_small":
            # one factorization serves both the mean and the variance diagonal
            c = _cholesky(dense_P(A, T, weights, precision, G))
            m = sla.cho_solve((np.tril(c), True), rhs)
            return m, CgInfo(0, 0.0, True), _diag_from_factor(c, T.matrix), []
        m, info_m = sbl_mean(precision, A, T, y_tilde, weights, config.eps_m,
                             config.max_cg_iters, m)
        diag, infos_v = sbl_variance_diag(precision, A, T, weights, config.variance_mode,
                                          config.eps_v, config.max_cg_iters)
        return m, info_m, diag, infos_v

    t0 = time.perf_counter()
    m = np.zeros(A.p)
    trace = []
    failures = []
    for t in range(1, config.n_em_iters + 1):
        m, info_m, diag, infos_v = e_step(precision, m)
        if not info_m.converged or not all(i.converged for i in infos_v):
            failures.append(t)
        d = T.matrix @ m
        precision = 1.0 / np.maximum(T.reduce(d * d + diag), PRECISION_FLOOR)
        trace.append(dict(iteration=t, cg_mean_iters=info_m.iterations,
                          cg_var_iters=sum(i.iterations for i in infos_v),
                          median_gamma=float(np.median(1.0 / precision)),
                          wall_ms=1e3 * (time.perf_counter() - t0)))
        if callback is not None:
            callback(t, m, 1.0 / precision)
    if config.n_em_iters > 0:
        if config.variance_mode == "exact_small":
            m = sla.cho_solve((np.tril(_cholesky(dense_P(A, T, weights, precision, G))), True), rhs)
        else:
            m, _ = sbl_mean(precision, A, T, y_tilde, weights, config.eps_m, config.max_cg_iters, m)
    return SblResult(np.maximum(m, 0.0), m, 1.0 / precision, trace, failures)
