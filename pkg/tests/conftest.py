import os
from pathlib import Path

import numpy as np
import pytest

from kipd.datasets import Dataset

MNIST_DIR = Path(os.environ.get("KIPD_MNIST_DIR", "/root/data/mnist"))


def have_mnist() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or (
        MNIST_DIR / "train-images-idx3-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST files not found in {MNIST_DIR}")


@pytest.fixture(scope="session")
def mnist():
    if not have_mnist():
        pytest.skip(f"MNIST files not found in {MNIST_DIR}")
    from kipd.datasets import load_mnist

    return load_mnist(MNIST_DIR)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_dataset(n=60, d=8, C=3, seed=0, image_shape=None) -> Dataset:
    r = np.random.default_rng(seed)
    labels = np.arange(n) % C
    centers = r.standard_normal((C, d)) * 2
    X = centers[labels] + r.standard_normal((n, d))
    return Dataset.from_labels(X, labels, C, image_shape)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 14):
        terminalreporter.write_line(mod.RESULTS.get(n, f"criterion {n:2d}: NOT RUN (skipped or errored)"))
