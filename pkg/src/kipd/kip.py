"""The KIP loop: learn a small support set by descending the KRR loss."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from kipd.autodiff import grad_kip_loss
from kipd.datasets import (
    AugmentOptions,
    ClassBalancedSampler,
    CorruptionMask,
    Dataset,
    augment,
    class_balanced_indices,
    make_corruption,
    one_hot_centered,
    per_class_counts,
)
from kipd.errors import NumericError
from kipd.kernels import KernelSpec

log = logging.getLogger(__name__)


@dataclass
class SupportSet:
    X: np.ndarray
    y: np.ndarray
    mask: CorruptionMask | None = None
    learn_labels: bool = False

    @property
    def n(self) -> int:
        return len(self.X)

    def copy(self) -> "SupportSet":
        return SupportSet(self.X.copy(), self.y.copy(), self.mask, self.learn_labels)


@dataclass
class KipConfig:
    kernels: list[KernelSpec]
    lam: float = 1e-6
    lr: float = 0.01
    target_batch: int = 6000
    support_batch: int | None = None  # None means the whole support set
    iterations: int = 1000
    init: str = "image"
    rho: float = 0.0
    corruption_scheme: str = "uniform"
    augment: AugmentOptions | None = None
    learn_labels: bool = False
    seed: int = 0
    checkpoint_count: int = 5
    reg_mode: str = "scale_invariant"

    def validate(self, n_s: int, n_t: int) -> None:
        if not self.kernels:
            raise ValueError("at least one kernel is required")
        if self.support_batch is not None and not 1 <= self.support_batch <= n_s:
            raise ValueError("support_batch must lie in [1, n_s]")
        if not 1 <= self.target_batch <= n_t:
            raise ValueError("target_batch must lie in [1, n_t]")
        if self.init not in ("image", "noise"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.lr < 0 or self.iterations < 0 or self.checkpoint_count < 1:
            raise ValueError("lr and iterations must be >= 0, checkpoint_count >= 1")


class AdamState:
    """Adam moments kept per full trainable tensor."""

    def __init__(self, shapes: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step = 0

    def update(self, params: dict, grads: dict, lr: float, rows=slice(None)) -> dict:
        """Return updated params; moments change only at ``rows``."""
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        out = {}
        for k, g in grads.items():
            m = self.m[k][rows] * self.beta1 + (1.0 - self.beta1) * g
            v = self.v[k][rows] * self.beta2 + (1.0 - self.beta2) * (g * g)
            self.m[k][rows] = m
            self.v[k][rows] = v
            p = params[k].copy()
            p[rows] = p[rows] - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out[k] = p
        return out


@dataclass
class KipState:
    support: SupportSet
    adam: AdamState
    sampler: ClassBalancedSampler
    step: int = 0
    kernel_counts: np.ndarray | None = None


@dataclass
class Checkpoint:
    step: int
    loss: float
    support: SupportSet


@dataclass
class KipResult:
    best: SupportSet
    history: list = field(default_factory=list)  # (step, loss)
    checkpoints: list = field(default_factory=list)
    kernel_counts: np.ndarray | None = None
    skipped_steps: int = 0


def init_support(target: Dataset, n_s: int, init: str = "image", rho: float = 0.0,
                 scheme: str = "uniform", rng: np.random.Generator | None = None,
                 learn_labels: bool = False) -> SupportSet:
    """Image init (class-balanced subset) or noise init, then corruption.

    The corruption draws come from a generator split off before anything
    touches ``target``, so frozen coordinates and values do not depend on it.
    """
    rng = np.random.default_rng() if rng is None else rng
    corrupt_rng = np.random.default_rng(rng.integers(2**63))
    C = target.num_classes
    if init == "image":
        idx = class_balanced_indices(target.labels, C, n_s, rng)
        X, y = target.X[idx].copy(), target.y[idx].copy()
    elif init == "noise":
        counts = per_class_counts(n_s, C, rng)
        labels = np.repeat(np.arange(C), counts)
        X = rng.uniform(-1.0, 1.0, size=(n_s, target.d))
        y = one_hot_centered(labels, C)
    else:
        raise ValueError(f"unknown init {init!r}")
    mask = None
    if rho > 0:
        mask, values = make_corruption(X.shape, rho, scheme, corrupt_rng)
        X = np.where(mask.frozen, values, X)
    return SupportSet(X, y, mask, learn_labels)


def new_state(support: SupportSet, target: Dataset, config: KipConfig,
              rng: np.random.Generator) -> KipState:
    shapes = {"X": support.X.shape}
    if support.learn_labels:
        shapes["y"] = support.y.shape
    return KipState(support, AdamState(shapes), ClassBalancedSampler(target, rng),
                    kernel_counts=np.zeros(len(config.kernels), dtype=np.int64))


def kip_step(state: KipState, target: Dataset, config: KipConfig,
             rng: np.random.Generator) -> float:
    """One KIP update, in place. Returns the loss at the pre-update support.

    On a NumericError the support set and Adam moments are left untouched and
    the error propagates.
    """
    which = int(rng.integers(len(config.kernels)))
    kernel = config.kernels[which]
    sup = state.support
    if config.support_batch is None or config.support_batch >= sup.n:
        rows = slice(None)
    else:
        rows = np.sort(rng.choice(sup.n, config.support_batch, replace=False))
    batch = target.subset(state.sampler.indices(config.target_batch))
    if config.augment is not None and config.augment.active:
        batch = augment(batch, rng, config.augment)
    frozen = sup.mask.frozen[rows] if sup.mask is not None else None
    loss, gX, gy = grad_kip_loss((sup.X[rows], sup.y[rows]), (batch.X, batch.y), kernel,
                                 config.lam, "both" if sup.learn_labels else "X_s",
                                 frozen, config.reg_mode)
    grads = {"X": gX}
    if sup.learn_labels:
        grads["y"] = gy
    new = state.adam.update({"X": sup.X, "y": sup.y}, grads, config.lr, rows)
    if frozen is not None:
        new["X"] = np.where(sup.mask.frozen, sup.X, new["X"])
    sup.X = new["X"]
    if sup.learn_labels:
        sup.y = new["y"]
    state.step += 1
    state.kernel_counts[which] += 1
    return loss


def run_kip(target: Dataset, n_s: int, config: KipConfig,
            callback: Callable[[int, SupportSet], None] | None = None,
            eval_every: int = 0, support: SupportSet | None = None) -> KipResult:
    """Run ``config.iterations`` KIP steps and keep the lowest-loss checkpoints.

    ``callback(step, support)`` is called at step 0, every ``eval_every``
    steps and after the last step.
    """
    config.validate(n_s, target.n)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_rng, sample_rng, step_rng = (np.random.default_rng(s) for s in seeds)
    if support is None:
        support = init_support(target, n_s, config.init, config.rho, config.corruption_scheme,
                               init_rng, config.learn_labels)
    state = new_state(support, target, config, sample_rng)
    result = KipResult(best=support.copy())
    skipped = 0

    if callback is not None:
        callback(0, state.support)
    for it in range(config.iterations):
        before = state.support.copy()
        try:
            loss = kip_step(state, target, config, step_rng)
        except NumericError as exc:
            skipped += 1
            log.warning("step %d skipped: %s", it, exc)
            continue
        result.history.append((it, loss))
        _keep_checkpoint(result.checkpoints, Checkpoint(it, loss, before),
                         config.checkpoint_count)
        done = it + 1
        if callback is not None and ((eval_every and done % eval_every == 0)
                                     or done == config.iterations):
            callback(done, state.support)

    if result.checkpoints:
        result.best = result.checkpoints[0].support
    result.kernel_counts = state.kernel_counts
    result.skipped_steps = skipped
    return result


def _keep_checkpoint(checkpoints: list, cp: Checkpoint, limit: int) -> None:
    if len(checkpoints) < limit or cp.loss < checkpoints[-1].loss:
        checkpoints.append(cp)
        checkpoints.sort(key=lambda c: c.loss)
        del checkpoints[limit:]


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for step, loss in history:
            w.writerow([step, repr(float(loss))])


def clone_config(config: KipConfig, **changes) -> KipConfig:
    new = copy.copy(config)
    for k, v in changes.items():
        setattr(new, k, v)
    return new
