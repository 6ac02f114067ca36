import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import toy_dataset
from kipd.autodiff.kip_grad import grad_kip_loss
from kipd.datasets import Dataset
from kipd.evaluation import measure_eps
from kipd.kernels import KernelSpec, kernel_matrix
from kipd.theory import (
    FAIL, GATED, LINEAR, PASS,
    Report,
    check_linear_kip_convergence,
    check_ls_theorem,
    check_optimal_loss_bound,
    linear_kip_loss_grad,
    projection_bound,
    reports_csv,
    ridge_coeffs,
    ridge_operator,
)


def synthetic(rng, n=200, d=10, C=3, noise=0.5):
    X = rng.standard_normal((n, d))
    y = X @ rng.standard_normal((d, C)) + noise * rng.standard_normal((n, C))
    return Dataset(X, y, y.argmax(axis=1), C)


def test_ridge_coeffs_examples():
    y = np.arange(6.0).reshape(3, 2)
    np.testing.assert_allclose(ridge_coeffs(np.eye(3), y, 0.0).w, y)
    np.testing.assert_allclose(ridge_coeffs([[2.0]], [[1.0]], 0.0).w, [[0.5]])
    np.testing.assert_allclose(ridge_coeffs([[1.0, 0.0]], [[1.0]], 1.0).w, [[0.5], [0.0]])
    with pytest.raises(ValueError):
        ridge_operator(np.eye(2), -1.0)


def test_ridge_operator_inverts_on_row_space(rng):
    X = rng.standard_normal((4, 7))
    v = X.T @ rng.standard_normal(4)
    np.testing.assert_allclose(ridge_operator(X, 1e-10) @ X @ v, v, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 5), st.sampled_from([1e-6, 1e-2, 1.0]))
def test_single_point_per_class_reproduces_any_w(seed, C, lam):
    r = np.random.default_rng(seed)
    w = r.standard_normal((8, C))
    X_tilde = w.T                        # rows span range(w), so w = Phi(X~) y~ is solvable
    y_tilde = w.T @ w + lam * np.eye(C)
    np.testing.assert_allclose(ridge_coeffs(X_tilde, y_tilde, lam).w, w, atol=1e-8)


def test_linear_grad_matches_tape(rng):
    Xs, ys = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    Xt, yt = rng.standard_normal((20, 4)), rng.standard_normal((20, 3))
    loss, g = linear_kip_loss_grad(Xs, ys, Xt, yt, 1e-2)
    tape_loss, tape_g, _ = grad_kip_loss((Xs, ys), (Xt, yt), LINEAR, 1e-2,
                                             reg_mode="absolute")
    assert loss == pytest.approx(float(tape_loss), rel=1e-12)
    np.testing.assert_allclose(g, tape_g, rtol=1e-9, atol=1e-11)


@pytest.mark.parametrize("n_s", [3, 5])
def test_linear_kip_converges_to_least_squares(n_s):
    rep = check_linear_kip_convergence(synthetic(np.random.default_rng(n_s)), n_s,
                                       rng=np.random.default_rng(7))
    assert rep.status == PASS, str(rep)
    assert rep.quantities["eps_bound"] == pytest.approx(0.5 * rep.quantities["gap"] ** 2)


def test_linear_kip_gates():
    data = synthetic(np.random.default_rng(0))
    assert check_linear_kip_convergence(data, 2).status == GATED
    X = data.X.copy()
    X[:, 1] = X[:, 0]
    flat = Dataset(X, data.y, data.labels, 3)
    assert check_linear_kip_convergence(flat, 5).status == GATED


def test_step_cap_reports_failure():
    rep = check_linear_kip_convergence(synthetic(np.random.default_rng(1)), 5,
                                       rng=np.random.default_rng(0), max_steps=3)
    assert rep.status == FAIL and "grad_norm" in rep.quantities
    assert "FAIL" in str(rep)


def test_ls_theorem_examples(rng):
    data = synthetic(rng, n=50, d=2, C=2)
    assert check_ls_theorem(rng.standard_normal((2, 2)), (data.X, data.y)).passed
    rep = check_ls_theorem(data.X, (data.X, data.y))
    assert rep.passed and rep.quantities["max_abs_err"] < 1e-6
    assert check_ls_theorem(np.ones((3, 2)), (data.X, data.y)).status == GATED


def test_projection_bound_special_cases(rng):
    y = rng.standard_normal((10, 2))
    K = kernel_matrix(KernelSpec("rbf"), rng.standard_normal((10, 3)), rng.standard_normal((12, 3)))
    assert projection_bound(K, y) == pytest.approx(0.0, abs=1e-12)
    a = rng.standard_normal((10, 1))
    q = a / np.linalg.norm(a)
    assert projection_bound(a, y) == pytest.approx(0.5 * np.sum((y - q @ (q.T @ y)) ** 2))


@pytest.mark.parametrize("name", ["linear", "rbf", "fc1"])
def test_optimal_loss_bound(name, rng):
    data = toy_dataset(n=40, d=6, C=3, seed=3)
    Xs = rng.standard_normal((1 if name == "linear" else 4, 6))
    rep = check_optimal_loss_bound(Xs, (data.X, data.y), KernelSpec.parse(name))
    assert rep.passed, str(rep)
    big = toy_dataset(n=201, d=3, C=3)
    assert check_optimal_loss_bound(Xs[:, :3], (big.X, big.y), LINEAR).status == GATED


def test_optimal_loss_bound_with_dependent_support(rng):
    # 10 support points in R^6 under a linear kernel: K_ss is singular, the ridge tiny
    data = toy_dataset(n=50, d=6, C=3, seed=5)
    rep = check_optimal_loss_bound(rng.standard_normal((10, 6)), (data.X, data.y), LINEAR)
    assert rep.passed, str(rep)


def test_eps_bound_holds_on_unit_ball():
    data = synthetic(np.random.default_rng(4))
    rng = np.random.default_rng(5)
    from kipd.theory import run_linear_kip

    Xs0, ys = rng.standard_normal((5, 10)), rng.standard_normal((5, 3))
    Xs = run_linear_kip(Xs0, ys, data.X, data.y, 1e-6, max_steps=200)[0]
    w_tilde = ridge_coeffs(Xs, ys, 1e-6).w
    w0 = ridge_coeffs(data.X, data.y, 0.0).w
    bound = 0.5 * np.linalg.norm(w_tilde - w0, 2) ** 2
    X = rng.standard_normal((500, 10))
    X /= np.maximum(1.0, np.linalg.norm(X, axis=1, keepdims=True))
    test = Dataset(X, X @ w0, (X @ w0).argmax(axis=1), 3)
    rep = measure_eps(lambda Z: Z @ w_tilde, lambda Z: Z @ w0, test, "mse")
    assert 0.5 * rep.strong_eps <= bound


def test_reports_csv():
    text = reports_csv([Report("a", PASS, {"x": 1.5}), Report("b", GATED, {}, "why")])
    lines = text.strip().splitlines()
    assert lines[0] == "check,status,quantity,value,note"
    assert lines[1] == "a,PASS,x,1.5," and lines[2].startswith("b,GATED")
