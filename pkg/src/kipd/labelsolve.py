"""Label Solve: closed-form minimum-norm support labels for fixed support inputs."""

from __future__ import annotations

import csv
import logging

import numpy as np
import scipy.linalg

from kipd.errors import NumericError, PreconditionError
from kipd.kernels import KernelSpec, kernel_matrix
from kipd.krr import effective_lambda

log = logging.getLogger(__name__)


def _regularized_support(X_s, kernel, lam, reg_mode):
    K_ss = kernel_matrix(kernel, X_s, X_s)
    lam_bar = float(effective_lambda(lam, K_ss, reg_mode))
    return K_ss + lam_bar * np.eye(len(K_ss)), lam_bar


def _svd(A):
    try:
        return scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesdd")
    except (np.linalg.LinAlgError, ValueError):
        try:
            return scipy.linalg.svd(A, full_matrices=False, lapack_driver="gesvd")
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericError(f"SVD failed: {exc}") from exc


def predictor_matrix(X_s, X_t, kernel: KernelSpec, lam: float = 1e-6,
                     reg_mode: str = "scale_invariant", rcond: float = 1e-10) -> np.ndarray:
    """A = K_ts (K_ss + lam_bar I)^+, the linear map from support labels to target predictions.

    For a PSD kernel K_ss v = 0 forces K_ts v = 0, so eigendirections of K_ss
    that are zero to working precision are dropped rather than amplified by
    1 / lam_bar. Without a ridge, eigenvalues below ``rcond`` times the largest
    are cut as in a pseudo-inverse.
    """
    X_s = np.asarray(X_s, dtype=np.float64)
    K_ss = kernel_matrix(kernel, X_s, X_s)
    lam_bar = float(effective_lambda(lam, K_ss, reg_mode))
    K_ts = kernel_matrix(kernel, np.asarray(X_t, dtype=np.float64), X_s)
    try:
        w, Q = scipy.linalg.eigh(K_ss)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition of K_ss failed: {exc}") from exc
    top = max(float(w[-1]), 0.0)
    cut = top * (len(w) * np.finfo(np.float64).eps if lam_bar > 0 else rcond)
    keep = w > cut
    Qk = Q[:, keep]
    return ((K_ts @ Qk) / (w[keep] + lam_bar)) @ Qk.T


def solve_labels(X_s, target, kernel: KernelSpec, lam: float = 1e-6, rcond: float = 1e-10,
                 reg_mode: str = "scale_invariant") -> np.ndarray:
    """y_s* = pinv(A) y_t, the minimum-norm minimizer of the KRR loss in y_s.

    Singular values of A below ``rcond * sigma_max`` are treated as zero.
    """
    if not rcond > 0:
        raise ValueError("rcond must be > 0")
    X_s = np.asarray(X_s, dtype=np.float64)
    if X_s.ndim != 2 or len(X_s) < 1:
        raise ValueError("need at least one support point")
    X_t, y_t = (np.asarray(a, dtype=np.float64) for a in target)
    A = predictor_matrix(X_s, X_t, kernel, lam, reg_mode, rcond)
    U, s, Vt = _svd(A)
    keep = s > rcond * s[0] if s.size and s[0] > 0 else np.zeros(s.shape, bool)
    if not keep.all():
        log.warning("label solve: %d of %d singular values cut by pinv", (~keep).sum(), s.size)
    coef = (U[:, keep].T @ y_t) / s[keep][:, None]
    return Vt[keep].T @ coef


def ls_injective_form(X_s, target, kernel: KernelSpec, lam: float = 1e-6, rcond: float = 1e-10,
                      reg_mode: str = "scale_invariant") -> np.ndarray:
    """(K_ss + lam_bar I) pinv(K_ts) y_t, valid when K_ts has full column rank."""
    X_s = np.asarray(X_s, dtype=np.float64)
    X_t, y_t = (np.asarray(a, dtype=np.float64) for a in target)
    K_ts = kernel_matrix(kernel, X_t, X_s)
    U, s, Vt = _svd(K_ts)
    if len(X_t) < len(X_s) or s.size == 0 or not s[-1] > rcond * s[0]:
        raise PreconditionError("K_ts is not injective (rank-deficient columns)")
    pinv_y = Vt.T @ ((U.T @ y_t) / s[:, None])
    return _regularized_support(X_s, kernel, lam, reg_mode)[0] @ pinv_y


def label_covariance(y_natural, y_solved) -> np.ndarray:
    """C x C covariance between natural label columns and solved label columns."""
    a = np.asarray(y_natural, dtype=np.float64)
    b = np.asarray(y_solved, dtype=np.float64)
    if a.shape != b.shape or len(a) < 2:
        raise ValueError("need matching label matrices with at least two rows")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    return a.T @ b / (len(a) - 1)


def write_covariance_csv(path, cov) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["natural_class"] + [f"solved_{j}" for j in range(cov.shape[1])])
        for i, row in enumerate(cov):
            w.writerow([i] + [repr(float(v)) for v in row])
