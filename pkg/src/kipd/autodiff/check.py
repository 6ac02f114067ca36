from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from kipd.autodiff.engine import Tape, value


@dataclass
class GradCheck:
    max_rel_error: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray


def numeric_gradient(f: Callable, point: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` at ``point``, one coordinate at a time."""
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = float(value(f(x)))
        x[idx] = old - h
        fm = float(value(f(x)))
        x[idx] = old
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def analytic_gradient(f: Callable, point: np.ndarray) -> np.ndarray:
    tape = Tape()
    x = tape.variable(point)
    (g,) = tape.gradient(f(x), [x])
    return g


def grad_check(f: Callable, point: np.ndarray, h: float = 1e-4) -> GradCheck:
    """Compare the tape gradient of ``f`` with central differences.

    ``f`` must be written with the engine ops so it runs both on a Node and on
    a plain array. The relative error of coordinate j is
    |a_j - n_j| / max(|a_j|, |n_j|, 1e-8 * max|n|), so coordinates whose true
    gradient is zero are judged against the gradient's overall scale.
    """
    point = np.asarray(point, dtype=np.float64)
    a = analytic_gradient(f, point)
    n = numeric_gradient(f, point, h)
    floor = max(1e-8 * float(np.max(np.abs(n), initial=0.0)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    rel = np.abs(a - n) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return GradCheck(float(rel.max(initial=0.0)), tuple(int(i) for i in worst), a, n)
