"""Kernel ridge regression and the KRR loss that KIP minimizes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from kipd.autodiff import engine as ad
from kipd.kernels import KernelSpec, kernel_matrix

REG_MODES = ("scale_invariant", "absolute")


def effective_lambda(lam: float, K_ss, reg_mode: str = "scale_invariant"):
    """Regularizer added to the support kernel.

    In scale-invariant mode this is lam * tr(K_ss) / n, which makes KRR
    predictions invariant to rescaling the kernel. Works on tape nodes.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if reg_mode == "absolute":
        return lam
    if reg_mode != "scale_invariant":
        raise ValueError(f"unknown reg_mode {reg_mode!r}")
    n = K_ss.shape[0]
    return ad.trace(K_ss) * (lam / n)


@dataclass(frozen=True)
class RidgeModel:
    X_s: np.ndarray
    kernel: KernelSpec
    lam: float
    alpha: np.ndarray
    reg_mode: str = "scale_invariant"
    lam_bar: float = 0.0

    def predict(self, X) -> np.ndarray:
        return predict(self, X)

    __call__ = predict


def fit(support, kernel: KernelSpec, lam: float = 1e-6,
        reg_mode: str = "scale_invariant") -> RidgeModel:
    X_s, y_s = (np.asarray(a, dtype=np.float64) for a in support)
    if len(X_s) == 0:
        raise ValueError("empty support set")
    if len(X_s) != len(y_s):
        raise ValueError("support features and labels differ in length")
    K = kernel_matrix(kernel, X_s, X_s)
    lam_bar = float(effective_lambda(lam, K, reg_mode))
    S = K + lam_bar * np.eye(len(K))
    factor = ad.cholesky(S)
    alpha = scipy.linalg.cho_solve(factor, y_s)
    # one step of iterative refinement keeps the residual at the 1e-8 level
    alpha = alpha + scipy.linalg.cho_solve(factor, y_s - S @ alpha)
    return RidgeModel(X_s, kernel, lam, alpha, reg_mode, lam_bar)


def predict(model: RidgeModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.X_s.shape[1]:
        raise ValueError(f"expected inputs with {model.X_s.shape[1]} features, got {X.shape}")
    return kernel_matrix(model.kernel, X, model.X_s) @ model.alpha


def kip_loss(support, target, kernel: KernelSpec, lam: float = 1e-6,
             reg_mode: str = "scale_invariant"):
    """0.5 * ||y_t - K_ts (K_ss + lam_bar I)^{-1} y_s||_F^2.

    ``support`` entries may be tape nodes; the result is then a node too.
    """
    X_s, y_s = support
    X_t, y_t = target
    if X_s.shape[0] == 0:
        raise ValueError("empty support set")
    K_ss = kernel_matrix(kernel, X_s, X_s)
    K_ts = kernel_matrix(kernel, X_t, X_s)
    lam_bar = effective_lambda(lam, K_ss, reg_mode)
    S = K_ss + lam_bar * np.eye(X_s.shape[0])
    pred = K_ts @ ad.solve_sym(S, y_s)
    return ad.frobenius_sq(y_t - pred) * 0.5


def accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) != len(labels):
        raise ValueError("predictions and labels differ in length")
    if len(labels) == 0:
        return 0.0
    return float(np.mean(np.argmax(predictions, axis=1) == labels))
