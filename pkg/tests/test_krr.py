import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kipd import krr
from kipd.kernels import KernelSpec, kernel_matrix

LIN, RBF = KernelSpec("linear"), KernelSpec("rbf")


def test_effective_lambda_modes():
    K = np.diag([1.0, 3.0])
    assert krr.effective_lambda(0.5, K) == pytest.approx(0.5 * 4.0 / 2)
    assert krr.effective_lambda(0.5, K, "absolute") == 0.5
    with pytest.raises(ValueError):
        krr.effective_lambda(-1.0, K)
    with pytest.raises(ValueError):
        krr.effective_lambda(1.0, K, "relative")


def test_one_point_hand_value():
    # K_ss = 4, lam_bar = 0.5 * 4 = 2, K(3, 2) = 6 -> prediction 6 / 6 * 1
    model = krr.fit((np.array([[2.0]]), np.array([[1.0]])), LIN, lam=0.5)
    assert model.lam_bar == pytest.approx(2.0)
    assert model.predict(np.array([[3.0]]))[0, 0] == pytest.approx(1.0, rel=1e-14)


def test_interpolates_at_zero_ridge(rng):
    X, y = rng.standard_normal((12, 4)), rng.standard_normal((12, 3))
    model = krr.fit((X, y), RBF, lam=0.0)
    np.testing.assert_allclose(model(X), y, atol=1e-9)


def test_kip_loss_matches_dense_formula(rng):
    Xs, ys = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
    Xt, yt = rng.standard_normal((9, 3)), rng.standard_normal((9, 2))
    Kss, Kts = kernel_matrix(RBF, Xs, Xs), kernel_matrix(RBF, Xt, Xs)
    lam_bar = 1e-2 * np.trace(Kss) / 5
    pred = Kts @ np.linalg.solve(Kss + lam_bar * np.eye(5), ys)
    expected = 0.5 * np.sum((yt - pred) ** 2)
    assert float(krr.kip_loss((Xs, ys), (Xt, yt), RBF, 1e-2)) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 20.0))
def test_scale_invariance(seed, a):
    r = np.random.default_rng(seed)
    Xs, ys = r.standard_normal((4, 6)), r.standard_normal((4, 2))
    Xt, yt = r.standard_normal((7, 6)), r.standard_normal((7, 2))
    # the linear kernel scales by a^2 when inputs scale by a
    base = float(krr.kip_loss((Xs, ys), (Xt, yt), LIN, 1e-3))
    scaled = float(krr.kip_loss((a * Xs, ys), (a * Xt, yt), LIN, 1e-3))
    assert scaled == pytest.approx(base, rel=1e-8)


def test_accuracy_and_ties():
    preds = np.array([[1.0, 1.0], [0.0, 2.0], [3.0, 1.0]])
    assert krr.accuracy(preds, [0, 1, 1]) == pytest.approx(2 / 3)
    assert krr.accuracy(np.zeros((0, 2)), []) == 0.0
    with pytest.raises(ValueError):
        krr.accuracy(preds, [0])


def test_argument_errors(rng):
    with pytest.raises(ValueError):
        krr.fit((np.zeros((0, 2)), np.zeros((0, 2))), RBF)
    with pytest.raises(ValueError):
        krr.fit((np.ones((2, 2)), np.ones((3, 2))), RBF)
    model = krr.fit((rng.standard_normal((3, 2)), np.eye(3)), RBF)
    with pytest.raises(ValueError, match="features"):
        model.predict(np.ones((1, 5)))
