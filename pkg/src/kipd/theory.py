"""Executable checks of the linear-kernel and label-solve theorems.

All checks here use an absolute ridge (no trace scaling), matching the plain
lambda-RR setting the theorems are stated in.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from kipd.datasets import Dataset
from kipd.kernels import KernelSpec
from kipd.labelsolve import predictor_matrix, solve_labels

LINEAR = KernelSpec("linear")
PASS, FAIL, GATED = "PASS", "FAIL", "GATED"


@dataclass(frozen=True)
class LinearRidgeCoeffs:
    w: np.ndarray  # d x C

    def predict(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w


def ridge_operator(X, lam: float) -> np.ndarray:
    """X^T (X X^T + lam I)^{-1}; the pseudo-inverse of X when lam == 0."""
    X = np.asarray(X, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        return np.linalg.pinv(X)
    return np.linalg.solve(X @ X.T + lam * np.eye(len(X)), X).T


def ridge_coeffs(X, y, lam: float) -> LinearRidgeCoeffs:
    return LinearRidgeCoeffs(ridge_operator(X, lam) @ np.asarray(y, dtype=np.float64))


@dataclass
class Report:
    check: str
    status: str
    quantities: dict = field(default_factory=dict)
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.status == PASS

    def __str__(self):
        q = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                     for k, v in self.quantities.items())
        return f"{self.check}: {self.status} {q}" + (f" ({self.note})" if self.note else "")


def reports_csv(reports) -> str:
    out = io.StringIO()
    w = csv.writer(out)
    w.writerow(["check", "status", "quantity", "value", "note"])
    for r in reports:
        for k, v in (r.quantities or {"-": ""}).items():
            w.writerow([r.check, r.status, k, v, r.note])
    return out.getvalue()


def linear_kip_loss_grad(X_s, y_s, X_t, y_t, lam: float):
    """Loss and X_s-gradient of linear-kernel KIP with an absolute ridge, in closed form."""
    S = X_s @ X_s.T + lam * np.eye(len(X_s))
    alpha = np.linalg.solve(S, y_s)
    w = X_s.T @ alpha
    r = y_t - X_t @ w
    G = -(X_t.T @ r)  # dL/dw
    B = np.linalg.solve(S, X_s @ G)
    grad = alpha @ G.T - (B @ alpha.T + alpha @ B.T) @ X_s
    return 0.5 * float(np.sum(r * r)), grad


def run_linear_kip(X_s, y_s, X_t, y_t, lam: float, lr: float = 1e-2, max_steps: int = 100_000,
                   grad_tol: float = 1e-7, patience: int = 200, min_lr: float = 1e-8):
    """Full-gradient KIP on X_s (linear kernel) with Adam and lr halving on plateaus.

    Returns ``(X_s, loss, grad_norm, steps)``.
    """
    X = np.array(X_s, dtype=np.float64)
    m = np.zeros_like(X)
    v = np.zeros_like(X)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best, since = np.inf, 0
    loss, g = linear_kip_loss_grad(X, y_s, X_t, y_t, lam)
    gnorm = float(np.linalg.norm(g))
    t = 0
    for t in range(1, max_steps + 1):
        if gnorm < grad_tol:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        X = X - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        loss, g = linear_kip_loss_grad(X, y_s, X_t, y_t, lam)
        gnorm = float(np.linalg.norm(g))
        if loss < best * (1 - 1e-9):
            best, since = loss, 0
        else:
            since += 1
            if since >= patience:
                lr, since = lr * 0.5, 0
                if lr < min_lr:
                    break
    return X, loss, gnorm, t


def check_linear_kip_convergence(target: Dataset, n_s: int, lam: float = 1e-6,
                                 rng: np.random.Generator | None = None,
                                 max_steps: int = 100_000, rel_tol: float = 1e-3) -> Report:
    """Run linear KIP from a random Gaussian init and compare w~ with the least-squares w_0."""
    rng = np.random.default_rng() if rng is None else rng
    X_t, y_t = target.X, target.y
    C = y_t.shape[1]
    name = f"linear_kip_convergence[n_s={n_s}]"
    if n_s < C:
        return Report(name, GATED, {"n_s": n_s, "C": C}, "needs n_s >= C")
    if np.linalg.matrix_rank(X_t) < X_t.shape[1]:
        return Report(name, GATED, {}, "X_t lacks full column rank; w_0 not unique")
    X_s = rng.standard_normal((n_s, X_t.shape[1]))
    y_s = rng.standard_normal((n_s, C))
    X_s, loss, gnorm, steps = run_linear_kip(X_s, y_s, X_t, y_t, lam, max_steps=max_steps)
    w0 = ridge_coeffs(X_t, y_t, 0.0).w
    w_tilde = ridge_coeffs(X_s, y_s, lam).w
    gap = float(np.linalg.norm(w_tilde - w0, 2))
    scale = float(np.linalg.norm(w0, 2))
    q = {"gap": gap, "w0_norm": scale, "eps_bound": 0.5 * gap ** 2, "loss": loss,
         "grad_norm": gnorm, "steps": steps}
    ok = gap <= rel_tol * scale
    note = "" if ok or gnorm < 1e-7 else "not converged within step cap"
    return Report(name, PASS if ok else FAIL, q, note)


def check_ls_theorem(X_s, target, lam: float = 0.0, tol: float = 1e-6) -> Report:
    """Solved labels at lam = 0 equal the 0-RR predictions X_s w_0 when both inputs have rank d."""
    X_s = np.asarray(X_s, dtype=np.float64)
    X_t, y_t = (np.asarray(a, dtype=np.float64) for a in target)
    d = X_t.shape[1]
    name = "ls_theorem"
    if np.linalg.matrix_rank(X_s) < d or np.linalg.matrix_rank(X_t) < d:
        return Report(name, GATED, {}, "rank(X_s) = rank(X_t) = d does not hold")
    y_star = solve_labels(X_s, (X_t, y_t), LINEAR, lam, reg_mode="absolute")
    w0 = ridge_coeffs(X_t, y_t, 0.0).w
    err = float(np.max(np.abs(y_star - X_s @ w0)))
    return Report(name, PASS if err <= tol else FAIL, {"max_abs_err": err})


def projection_bound(K_ts, y_t, rcond: float = 1e-10) -> float:
    """0.5 * ||P_perp y_t||^2 with P the projection onto the column space of K_ts."""
    U, s, _ = np.linalg.svd(K_ts, full_matrices=False)
    Q = U[:, s > rcond * s[0]] if s.size and s[0] > 0 else U[:, :0]
    resid = y_t - Q @ (Q.T @ y_t)
    return 0.5 * float(np.sum(resid * resid))


def check_optimal_loss_bound(X_s, target, kernel: KernelSpec, lam: float = 1e-6,
                             tol: float = 1e-8) -> Report:
    """With labels solved, the loss for fixed X_s equals the projection residual bound."""
    from kipd.kernels import kernel_matrix

    X_s = np.asarray(X_s, dtype=np.float64)
    X_t, y_t = (np.asarray(a, dtype=np.float64) for a in target)
    if len(X_t) > 200:
        return Report("optimal_loss_bound", GATED, {"n_t": len(X_t)}, "small instances only")
    y_star = solve_labels(X_s, (X_t, y_t), kernel, lam, reg_mode="absolute")
    A = predictor_matrix(X_s, X_t, kernel, lam, reg_mode="absolute")
    resid = y_t - A @ y_star
    loss = 0.5 * float(np.sum(resid * resid))
    bound = projection_bound(kernel_matrix(kernel, X_t, X_s), y_t)
    diff = abs(loss - bound)
    return Report("optimal_loss_bound", PASS if diff <= tol else FAIL,
                  {"loss": loss, "bound": bound, "abs_diff": diff})
