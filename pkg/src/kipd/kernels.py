"""Analytic kernels: linear, RBF and fully-connected ReLU NTK/NNGP.

All kernel functions are written with the autodiff ops, so they accept plain
arrays (returning arrays) or tape nodes (returning nodes).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace

import numpy as np

from kipd.autodiff import engine as ad
from kipd.errors import NumericError

FAMILIES = ("linear", "rbf", "fc")
MODES = ("ntk", "nngp")
BLOCK_ROWS = 8192


@dataclass(frozen=True)
class KernelSpec:
    family: str
    depth: int = 1
    gamma: float = 1.0
    sigma_w2: float = 2.0
    sigma_b2: float = 1e-4
    mode: str = "ntk"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown kernel mode {self.mode!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.sigma_w2 > 0 or self.sigma_b2 < 0:
            raise ValueError("need sigma_w2 > 0 and sigma_b2 >= 0")

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        """Parse names like ``linear``, ``rbf``, ``rbf:gamma=0.5``, ``fc2``, ``fc1-nngp``."""
        name, _, opts = text.strip().lower().partition(":")
        m = re.fullmatch(r"fc(\d+)(?:-(ntk|nngp))?", name)
        if m:
            spec = cls("fc", depth=int(m.group(1)), mode=m.group(2) or "ntk")
        elif name in ("linear", "rbf"):
            spec = cls(name)
        else:
            raise ValueError(f"cannot parse kernel {text!r}")
        for item in filter(None, opts.split(",")):
            key, _, val = item.partition("=")
            if key not in ("gamma", "sigma_w2", "sigma_b2"):
                raise ValueError(f"unknown kernel option {key!r} in {text!r}")
            spec = replace(spec, **{key: float(val)})
        return spec

    def __str__(self):
        if self.family == "fc":
            return f"fc{self.depth}-{self.mode}"
        return self.family


def kernel_matrix(spec: KernelSpec, U, V):
    """Matrix of kernel values K(U_i, V_j)."""
    if ad.value(U).ndim != 2 or ad.value(V).ndim != 2:
        raise ValueError("kernel inputs must be 2-D (points x features)")
    if U.shape[1] != V.shape[1]:
        raise ValueError(f"feature dimensions differ: {U.shape[1]} vs {V.shape[1]}")
    if not isinstance(U, ad.Node) and not isinstance(V, ad.Node) and len(U) > BLOCK_ROWS:
        # bound the elementwise temporaries of large evaluation-only matrices
        out = np.empty((len(U), len(V)))
        for i in range(0, len(U), BLOCK_ROWS):
            out[i:i + BLOCK_ROWS] = kernel_matrix(spec, U[i:i + BLOCK_ROWS], V)
        return out
    if spec.family == "linear":
        K = U @ V.T
    elif spec.family == "rbf":
        K = rbf_kernel(U, V, spec.gamma)
    else:
        K = fc_kernel(spec, U, V)
    if not np.all(np.isfinite(ad.value(K))):
        raise NumericError(f"non-finite entries in {spec} kernel matrix")
    return K


def rbf_kernel(U, V, gamma: float = 1.0):
    d = U.shape[1]
    sq = ad.sq_row_norms(U)[:, None] + ad.sq_row_norms(V)[None, :] - 2.0 * (U @ V.T)
    return ad.exp(ad.clip(sq, 0.0, np.inf) * (-gamma / d))


def fc_kernel(spec: KernelSpec, U, V):
    """NTK or NNGP of a ReLU network with ``spec.depth`` hidden layers.

    Input layer covariance is sigma_w2 * <x, x'> / d + sigma_b2; every hidden
    layer applies the ReLU arc-cosine map with the 1/(2 pi) normalization of
    E[relu(u) relu(v)], so the diagonal obeys q -> sigma_w2 * q / 2 + sigma_b2.
    """
    sw, sb = spec.sigma_w2, spec.sigma_b2
    d = U.shape[1]
    qu = ad.sq_row_norms(U) * (sw / d) + sb
    qv = ad.sq_row_norms(V) * (sw / d) + sb
    cov = (U @ V.T) * (sw / d) + sb
    ntk = cov
    # arccos amplifies roundoff in c ~ 1; self-pairs have c == 1 exactly
    eye = np.eye(U.shape[0]) if U is V else None
    for _ in range(spec.depth):
        norm = ad.sqrt(qu[:, None] * qv[None, :])
        c = ad.clip(cov / (norm + 1e-300), -1.0, 1.0)
        if eye is not None:
            c = c * (1.0 - eye) + eye
        theta = ad.arccos(c)
        cov = norm * ((ad.sin(theta) + (math.pi - theta) * c) * (sw / (2 * math.pi))) + sb
        if spec.mode == "ntk":
            ntk = cov + ntk * ((math.pi - theta) * (sw / (2 * math.pi)))
        qu = qu * (sw / 2) + sb
        qv = qv * (sw / 2) + sb
    return ntk if spec.mode == "ntk" else cov


def fc_diagonal(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    """K(x, x) for every row of X (cheap closed form)."""
    X = np.asarray(X, dtype=np.float64)
    sw, sb = spec.sigma_w2, spec.sigma_b2
    q = np.einsum("ij,ij->i", X, X) * (sw / X.shape[1]) + sb
    ntk = q.copy()
    for _ in range(spec.depth):
        q = q * (sw / 2) + sb
        ntk = q + ntk * (sw / 2)
    return ntk if spec.mode == "ntk" else q


def mc_kernel_oracle(spec: KernelSpec, U, V, width: int = 4096, samples: int = 64,
                     rng: np.random.Generator | None = None):
    """Monte-Carlo estimate of an FC kernel from random finite networks.

    Weights are N(0, 1) scaled by sqrt(sigma_w2 / fan_in), biases N(0, 1)
    scaled by sqrt(sigma_b2). The NNGP estimate averages f(u) f(v); the NTK
    estimate averages the parameter-gradient inner product. Returns
    ``(mean, standard_error)``.
    """
    if spec.family != "fc":
        raise ValueError("Monte-Carlo oracle is defined for fc kernels only")
    rng = np.random.default_rng() if rng is None else rng
    U = np.asarray(U, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    a = len(U)
    X = np.concatenate([U, V]).astype(np.float32)
    sw, sb = math.sqrt(spec.sigma_w2), math.sqrt(spec.sigma_b2)
    total = np.zeros((a, len(V)))
    total_sq = np.zeros_like(total)

    for _ in range(samples):
        inputs, pre, mats = [], [], []
        x = X
        for layer in range(spec.depth):
            fan_in = x.shape[1]
            W = rng.standard_normal((fan_in, width), dtype=np.float32)
            b = rng.standard_normal(width, dtype=np.float32)
            h = (sw / math.sqrt(fan_in)) * (x @ W) + sb * b
            inputs.append(x)
            pre.append(h)
            mats.append(W)
            x = np.maximum(h, 0)
        w_out = rng.standard_normal(width, dtype=np.float32)
        b_out = rng.standard_normal(dtype=np.float32)
        f = ((sw / math.sqrt(width)) * (x @ w_out) + sb * b_out).astype(np.float64)

        if spec.mode == "nngp":
            est = np.outer(f[:a], f[a:])
        else:
            xg = x.astype(np.float64)
            est_full = (spec.sigma_w2 / width) * (xg @ xg.T) + spec.sigma_b2
            delta = (sw / math.sqrt(width)) * w_out * (pre[-1] > 0)
            for layer in range(spec.depth - 1, -1, -1):
                inp = inputs[layer].astype(np.float64)
                dd = delta.astype(np.float64) @ delta.astype(np.float64).T
                est_full += (spec.sigma_w2 / inp.shape[1]) * dd * (inp @ inp.T) + spec.sigma_b2 * dd
                if layer > 0:
                    fan_in = inputs[layer].shape[1]
                    delta = (sw / math.sqrt(fan_in)) * (delta @ mats[layer].T) * (pre[layer - 1] > 0)
            est = est_full[:a, a:]
        total += est
        total_sq += est * est

    mean = total / samples
    var = np.maximum(total_sq / samples - mean * mean, 0.0) * samples / max(samples - 1, 1)
    return mean, np.sqrt(var / samples)
