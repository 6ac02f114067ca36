"""Measuring distilled datasets: epsilon-closeness, baselines and transfer to FC networks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from kipd import krr
from kipd.autodiff import engine as ad
from kipd.autodiff.engine import Tape
from kipd.datasets import Dataset, class_balanced_sample
from kipd.errors import NumericError
from kipd.kernels import KernelSpec

LR_GRID = (1e-4, 4e-4, 1e-3, 4e-3)
LOSS_KINDS = ("zero-one", "mse")


@dataclass(frozen=True)
class EpsReport:
    weak_eps: float
    strong_eps: float
    loss_a: float
    loss_b: float
    n_eval: int
    loss_kind: str


def measure_eps(model_a: Callable, model_b: Callable, testset: Dataset,
                loss_kind: str = "zero-one") -> EpsReport:
    """Empirical weak and strong epsilon between two predictors on ``testset``.

    zero-one: losses are error rates, strong eps is the argmax disagreement rate.
    mse: losses are mean squared Euclidean distances to the labels, strong eps
    the mean squared distance between the two models' outputs.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
    fa = np.asarray(model_a(testset.X), dtype=np.float64)
    fb = np.asarray(model_b(testset.X), dtype=np.float64)
    if fa.shape != testset.y.shape or fb.shape != testset.y.shape:
        raise ValueError("predictors must map each test input to num_classes outputs")
    if loss_kind == "zero-one":
        pa, pb = fa.argmax(axis=1), fb.argmax(axis=1)
        loss_a = float(np.mean(pa != testset.labels))
        loss_b = float(np.mean(pb != testset.labels))
        strong = float(np.mean(pa != pb))
    else:
        loss_a = float(np.mean(np.sum((fa - testset.y) ** 2, axis=1)))
        loss_b = float(np.mean(np.sum((fb - testset.y) ** 2, axis=1)))
        strong = float(np.mean(np.sum((fa - fb) ** 2, axis=1)))
    return EpsReport(abs(loss_a - loss_b), strong, loss_a, loss_b, testset.n, loss_kind)


def compression_ratio(original_size: int, distilled_size: int) -> float:
    if original_size < 1 or distilled_size < 1:
        raise ValueError("dataset sizes must be >= 1")
    if distilled_size > original_size:
        raise ValueError("distilled set is larger than the original")
    return original_size / distilled_size


@dataclass(frozen=True)
class BaselineRow:
    size: int
    mean: float
    std: float
    accuracies: tuple


def baseline_curve(D: Dataset, testset: Dataset, kernel: KernelSpec, sizes, resamples: int = 20,
                   lam: float = 1e-6, rng: np.random.Generator | None = None) -> list[BaselineRow]:
    """KRR test accuracy of class-balanced random subsets, mean and sample std per size."""
    if resamples < 2:
        raise ValueError("resamples must be >= 2")
    rng = np.random.default_rng() if rng is None else rng
    rows = []
    for size in sizes:
        accs = []
        for _ in range(resamples):
            S = class_balanced_sample(D, int(size), rng)
            model = krr.fit((S.X, S.y), kernel, lam)
            accs.append(krr.accuracy(model.predict(testset.X), testset.labels))
        rows.append(BaselineRow(int(size), float(np.mean(accs)), float(np.std(accs, ddof=1)),
                                tuple(accs)))
    return rows


def write_baseline_csv(path_or_file, rows, kernel_name: str = "", header: bool = True) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    f = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(f)
        if header:
            w.writerow(["kernel", "size", "mean_acc_pct", "std_pct", "resamples"])
        for r in rows:
            w.writerow([kernel_name, r.size, f"{100 * r.mean:.2f}", f"{100 * r.std:.2f}",
                        len(r.accuracies)])
    finally:
        if own:
            f.close()


# ------------------------------------------------------------ FC networks

@dataclass
class FcNetwork:
    """ReLU MLP with ``depth`` hidden layers in standard parameterization."""

    weights: list
    biases: list
    loss: str = "xent"

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def width(self) -> int:
        return self.weights[0].shape[1]

    @classmethod
    def init(cls, d: int, num_classes: int, depth: int = 1, width: int = 1024,
             loss: str = "xent", rng: np.random.Generator | None = None,
             sigma_w2: float = 2.0, sigma_b2: float = 1e-4) -> "FcNetwork":
        if loss not in ("xent", "mse"):
            raise ValueError("loss must be 'xent' or 'mse'")
        if depth < 1 or width < 1:
            raise ValueError("depth and width must be >= 1")
        rng = np.random.default_rng() if rng is None else rng
        dims = [d] + [width] * depth + [num_classes]
        W = [rng.standard_normal((a, b)) * math.sqrt(sigma_w2 / a) for a, b in zip(dims, dims[1:])]
        b = [rng.standard_normal(n) * math.sqrt(sigma_b2) for n in dims[1:]]
        return cls(W, b, loss)

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def __call__(self, X) -> np.ndarray:
        return forward(self.params(), X)

    def accuracy(self, testset: Dataset) -> float:
        return krr.accuracy(self(testset.X), testset.labels)


def forward(params, X):
    """Logits of the MLP; ``params`` alternates weights and biases, may hold tape nodes."""
    h = X
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


def network_loss(params, X, targets, loss: str = "xent"):
    out = forward(params, X)
    if loss == "xent":
        return ad.softmax_cross_entropy(out, targets)
    diff = out - targets
    return ad.frobenius_sq(diff) * (0.5 / X.shape[0])


def training_targets(D: Dataset, loss: str) -> np.ndarray:
    """One-hot rows for cross entropy, mean-centered one-hot for mse."""
    if loss == "xent":
        return np.eye(D.num_classes)[np.argmax(D.y, axis=1)]
    return D.y


@dataclass
class TrainResult:
    net: FcNetwork
    losses: list = field(default_factory=list)
    diverged: bool = False


def train_fc(trainset: Dataset, depth: int = 1, width: int = 1024, optimizer: str = "adam",
             lr: float = 4e-4, momentum: float = 0.9, steps: int = 300, loss: str = "xent",
             batch_size: int | None = None, rng: np.random.Generator | None = None,
             hook: Callable[[int, FcNetwork], None] | None = None) -> TrainResult:
    """Train an FC network on ``trainset``; full batch unless ``batch_size`` is given.

    A non-finite loss stops training and marks the result as diverged.
    """
    if optimizer not in ("adam", "sgd"):
        raise ValueError("optimizer must be 'adam' or 'sgd'")
    rng = np.random.default_rng() if rng is None else rng
    net = FcNetwork.init(trainset.d, trainset.num_classes, depth, width, loss, rng)
    targets = training_targets(trainset, loss)
    params = net.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    result = TrainResult(net)
    for step in range(1, steps + 1):
        idx = (slice(None) if batch_size is None or batch_size >= trainset.n
               else rng.choice(trainset.n, batch_size, replace=False))
        with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
            nodes = [tape.variable(p) for p in params]
            out = network_loss(nodes, trainset.X[idx], targets[idx], loss)
            val = float(out.value)
            try:
                grads = tape.gradient(out, nodes) if np.isfinite(val) else None
            except NumericError:
                grads = None
        if grads is None:
            result.diverged = True
            break
        result.losses.append(val)
        for i, g in enumerate(grads):
            if optimizer == "adam":
                m[i] = 0.9 * m[i] + 0.1 * g
                v[i] = 0.999 * v[i] + 0.001 * g * g
                params[i] = params[i] - lr * (m[i] / (1 - 0.9 ** step)) / (
                    np.sqrt(v[i] / (1 - 0.999 ** step)) + 1e-8)
            else:
                m[i] = momentum * m[i] + g
                params[i] = params[i] - lr * m[i]
        net.weights, net.biases = params[0::2], params[1::2]
        if hook is not None:
            hook(step, net)
    return result


def transfer_accuracy(trainset: Dataset, testset: Dataset, seeds, lr_grid=LR_GRID,
                      **train_kwargs) -> tuple[float, float, dict]:
    """Best-of-grid mean test accuracy over ``seeds``.

    Returns ``(best_mean, best_lr, {lr: [accuracies]})``. Diverged runs count
    as chance-level accuracy.
    """
    table = {}
    for lr in lr_grid:
        accs = []
        for seed in seeds:
            res = train_fc(trainset, lr=lr, rng=np.random.default_rng(seed), **train_kwargs)
            accs.append(1.0 / trainset.num_classes if res.diverged else res.net.accuracy(testset))
        table[lr] = accs
    best_lr = max(table, key=lambda k: np.mean(table[k]))
    return float(np.mean(table[best_lr])), best_lr, table
