import gzip
import math
import struct
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kipd.datasets import (
    AugmentOptions,
    ClassBalancedSampler,
    Dataset,
    augment,
    class_balanced_indices,
    class_balanced_sample,
    corrupted_count,
    flip_horizontal,
    load_csv,
    load_idx,
    make_corruption,
    one_hot_centered,
    per_class_counts,
    rotate_image,
    shift_image,
    standardize,
    zca_whiten,
)
from kipd.errors import FormatError, NumericError

from conftest import needs_mnist, toy_dataset


def idx_bytes(arr: np.ndarray, magic=0x0803) -> bytes:
    head = struct.pack(">I", (magic & ~0xFF) | arr.ndim) + b"".join(
        struct.pack(">I", n) for n in arr.shape)
    return head + arr.astype(np.uint8).tobytes()


class TestIdx:
    def test_round_trip(self, tmp_path):
        arr = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
        p = tmp_path / "imgs"
        p.write_bytes(idx_bytes(arr))
        np.testing.assert_array_equal(load_idx(p), arr)

    def test_gzip_and_labels(self, tmp_path):
        labels = np.array([3, 1, 4, 1, 5], dtype=np.uint8)
        p = tmp_path / "labels.gz"
        p.write_bytes(gzip.compress(idx_bytes(labels, 0x0801)))
        np.testing.assert_array_equal(load_idx(p), labels)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(struct.pack(">IIII", 0x0D03, 1, 2, 2) + bytes(4))
        with pytest.raises(FormatError, match="magic"):
            load_idx(p)

    @pytest.mark.parametrize("cut", [-1, 3, 9])
    def test_truncated(self, tmp_path, cut):
        raw = idx_bytes(np.zeros((2, 2, 2), dtype=np.uint8))
        p = tmp_path / "short"
        p.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            load_idx(p)

    def test_oversized(self, tmp_path):
        p = tmp_path / "long"
        p.write_bytes(idx_bytes(np.zeros(4, dtype=np.uint8), 0x0801) + b"\0")
        with pytest.raises(FormatError, match="oversized"):
            load_idx(p)


@needs_mnist
def test_mnist_shapes_and_counts(mnist):
    train, test = mnist
    assert (train.n, train.d, test.n) == (60000, 784, 10000)
    assert train.image_shape == (28, 28, 1)
    # standard MNIST class frequencies
    np.testing.assert_array_equal(np.bincount(train.labels),
                                  [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949])
    np.testing.assert_array_equal(np.bincount(test.labels),
                                  [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009])
    assert abs(train.X.mean()) < 1e-10
    assert abs(train.X.std() - 1.0) < 1e-10
    np.testing.assert_allclose(train.y.sum(axis=1), 0.0, atol=1e-12)


def test_csv_round_trip(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n0.5,1.0,0\n-2,3,1\n1,1,2\n")
    D = load_csv(p)
    assert (D.n, D.d, D.num_classes) == (3, 2, 3)
    np.testing.assert_array_equal(D.labels, [0, 1, 2])


@pytest.mark.parametrize("body", ["a,label\n1,0.5\n", "a,label\n1,-1\n", "a,label\nx,1\n"])
def test_csv_rejects_bad_rows(tmp_path, body):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(FormatError):
        load_csv(p)


def test_one_hot_centered_example():
    y = one_hot_centered([3], 10)
    expected = np.full(10, -0.1)
    expected[3] = 0.9
    np.testing.assert_allclose(y[0], expected, atol=1e-15)
    with pytest.raises(ValueError):
        one_hot_centered([10], 10)


def test_validate_rejects_duplicate_rows():
    D = Dataset.from_labels(np.array([[1.0, 2.0], [1.0, 2.0]]), [0, 1])
    with pytest.raises(ValueError, match="distinct"):
        D.validate()


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(1, 3), st.integers(1, 6), st.integers(0, 2**31))
def test_standardize_zero_mean_unit_std(n, channels, pixels, seed):
    r = np.random.default_rng(seed)
    X = r.normal(3.0, 2.0, size=(n, pixels * channels))
    Z, _, (mean, std) = standardize(X, channels=channels)
    per = Z.reshape(n, pixels, channels)
    np.testing.assert_allclose(per.mean(axis=(0, 1)), 0.0, atol=1e-10)
    live = std >= 1e-12
    np.testing.assert_allclose(per.std(axis=(0, 1))[live], 1.0, atol=1e-10)


def test_standardize_constant_channel_only_shifted():
    X = np.column_stack([np.full(5, 7.0), np.arange(5.0)])
    Z, (T,), _ = standardize(X, [np.array([[8.0, 0.0]])], channels=2)
    np.testing.assert_array_equal(Z[:, 0], 0.0)
    assert T[0, 0] == 1.0


def test_zca_whitens(rng):
    A = rng.standard_normal((5, 5))
    X = rng.standard_normal((2000, 5)) @ A
    W, (T,) = zca_whiten(X, [X[:3]], eps=0.0)
    np.testing.assert_allclose(W.T @ W / len(W), np.eye(5), atol=1e-10)
    np.testing.assert_allclose(T, W[:3])
    with pytest.raises(NumericError):
        zca_whiten(np.ones((10, 3)), eps=0.0)
    with pytest.raises(ValueError):
        zca_whiten(X, eps=-1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 200), st.integers(1, 12), st.integers(0, 2**31))
def test_per_class_counts_balanced(m, C, seed):
    counts = per_class_counts(m, C, np.random.default_rng(seed))
    assert counts.sum() == m
    assert counts.max() - counts.min() <= 1


def test_class_balanced_one_per_class(rng):
    D = toy_dataset(n=30, C=10)
    S = class_balanced_sample(D, 10, rng)
    assert sorted(S.labels) == list(range(10))
    with pytest.raises(ValueError):
        class_balanced_indices(D.labels, 10, 40, rng)


def test_sampler_without_replacement_within_epoch(rng):
    D = toy_dataset(n=60, C=3)
    sampler = ClassBalancedSampler(D, rng)
    first = np.concatenate([sampler.indices(6) for _ in range(10)])
    assert len(np.unique(first)) == 60  # one full pass, no repeats
    nxt = sampler.indices(30)
    assert np.all(np.bincount(D.labels[nxt], minlength=3) == 10)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 99), st.integers(1, 3072))
def test_corrupted_count_is_exact_ceiling(pct, d):
    rho = pct / 100
    assert corrupted_count(rho, d) == math.ceil(Fraction(pct, 100) * d)


def test_corrupted_count_mnist():
    assert corrupted_count(0.9, 784) == 706
    assert corrupted_count(0.9, 3072) == 2765


@pytest.mark.parametrize("scheme", ["uniform", "zero"])
def test_make_corruption(scheme, rng):
    mask, values = make_corruption((7, 784), 0.9, scheme, rng)
    assert np.all(mask.frozen.sum(axis=1) == 706)
    assert mask.count_per_row == 706
    assert np.all(values[~mask.frozen] == 0)
    if scheme == "zero":
        assert np.all(values == 0)
    else:
        assert np.all(np.abs(values) <= 1) and np.any(values != 0)


def test_corruption_depends_only_on_rng():
    a, va = make_corruption((3, 50), 0.5, "uniform", np.random.default_rng(5))
    b, vb = make_corruption((3, 50), 0.5, "uniform", np.random.default_rng(5))
    np.testing.assert_array_equal(a.frozen, b.frozen)
    np.testing.assert_array_equal(va, vb)


@pytest.mark.parametrize("rho", [-0.1, 1.0])
def test_corruption_rejects_rho(rho, rng):
    with pytest.raises(ValueError):
        make_corruption((2, 4), rho, "zero", rng)


class TestAugment:
    img = np.arange(16.0).reshape(4, 4, 1)

    def test_flip(self):
        np.testing.assert_array_equal(flip_horizontal(self.img)[:, :, 0], self.img[:, ::-1, 0])

    def test_shift_zero_fill(self):
        out = shift_image(self.img, 1, -2)[:, :, 0]
        expected = np.zeros((4, 4))
        expected[1:, :2] = self.img[:3, 2:, 0]
        np.testing.assert_array_equal(out, expected)

    def test_rotation(self):
        np.testing.assert_array_equal(rotate_image(self.img, 0.0), self.img)
        rot = rotate_image(self.img, 90.0)[:, :, 0]
        assert sorted(rot.ravel()) == sorted(self.img.ravel())

    def test_batch_labels_unchanged(self, rng):
        D = toy_dataset(n=9, d=16, C=3, image_shape=(4, 4, 1))
        out = augment(D, rng, AugmentOptions(flip=True, shift_px=1, rot_deg=10))
        np.testing.assert_array_equal(out.y, D.y)
        assert out.X.shape == D.X.shape
        assert augment(D, rng, AugmentOptions()) is D
