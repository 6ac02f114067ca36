"""Reverse-mode differentiation over a closed set of matrix primitives.

Every op accepts plain arrays or :class:`Node` values. With no ``Node`` among
the inputs an op is just the numpy computation, so kernel and loss code is
written once and runs both as a plain evaluation and on a tape.

    tape = Tape()
    x = tape.variable(np.ones((3, 2)))
    loss = frobenius_sq(x @ x.T)
    (gx,) = tape.gradient(loss, [x])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from kipd.errors import NumericError

# Adjoint of arccos is defined as 0 at or beyond this |c|.
ARCCOS_GUARD = 1.0 - 1e-9


class Node:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "index", "value", "parents", "vjp", "op")
    # make ndarray <op> Node dispatch to the Node's reflected operator
    __array_ufunc__ = None

    def __init__(self, tape, index, value, parents, vjp, op):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Node(#{self.index} {self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)


class Tape:
    """Append-only record of primitive ops; inputs always precede outputs.

    Nodes and their tape reference each other, so large intermediates live
    until the cycle collector runs. Use the tape as a context manager (or call
    :meth:`clear`) in loops to free them promptly.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.clear()
        return False

    def clear(self) -> None:
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
        self.nodes.clear()

    def variable(self, value, name: str = "input") -> Node:
        value = np.array(value, dtype=np.float64)
        return self._push(name, value, (), None)

    def _push(self, op, value, parents, vjp) -> Node:
        node = Node(self, len(self.nodes), value, parents, vjp, op)
        self.nodes.append(node)
        return node

    def gradient(self, output: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        """Adjoints of scalar ``output`` with respect to each of ``wrt``."""
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.value.size != 1:
            raise ValueError(f"output must be scalar, got shape {output.shape}")
        adjoints: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for node in reversed(self.nodes[: output.index + 1]):
            g = adjoints.pop(node.index, None)
            if g is None or node.vjp is None:
                if g is not None:
                    adjoints[node.index] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not isinstance(parent, Node) or pg is None:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(
                        f"non-finite adjoint from node #{node.index} ({node.op}) "
                        f"into node #{parent.index} ({parent.op})"
                    )
                if parent.index in adjoints:
                    adjoints[parent.index] = adjoints[parent.index] + pg
                else:
                    adjoints[parent.index] = pg
        grads = []
        for leaf in wrt:
            g = adjoints.get(leaf.index)
            grads.append(np.zeros_like(leaf.value) if g is None else np.reshape(g, leaf.shape))
        return grads


def value(x) -> np.ndarray:
    """Underlying array of a Node or array-like."""
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise ValueError("cannot combine nodes from different tapes")
    return tape


def _record(op: str, out: np.ndarray, args: tuple, vjp: Callable):
    tape = _tape_of(*args)
    if tape is None:
        return out
    return tape._push(op, out, args, vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _needs(*args):
    return [isinstance(a, Node) for a in args]


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    va, vb = value(a), value(b)
    return _record("add", va + vb, (a, b),
                   lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = value(a), value(b)
    return _record("sub", va - vb, (a, b),
                   lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))


def neg(a):
    return _record("neg", -value(a), (a,), lambda g: (-g,))


def mul(a, b):
    va, vb = value(a), value(b)
    na, nb = _needs(a, b)

    def vjp(g):
        return (_unbroadcast(g * vb, va.shape) if na else None,
                _unbroadcast(g * va, vb.shape) if nb else None)

    return _record("mul", va * vb, (a, b), vjp)


def div(a, b):
    va, vb = value(a), value(b)
    out = va / vb
    na, nb = _needs(a, b)

    def vjp(g):
        return (_unbroadcast(g / vb, va.shape) if na else None,
                _unbroadcast(-g * out / vb, vb.shape) if nb else None)

    return _record("div", out, (a, b), vjp)


def matmul(a, b):
    va, vb = value(a), value(b)
    na, nb = _needs(a, b)

    def vjp(g):
        return (g @ vb.T if na else None, va.T @ g if nb else None)

    return _record("matmul", va @ vb, (a, b), vjp)


def transpose(a):
    return _record("transpose", value(a).T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    va = value(a)
    return _record("reshape", va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def getitem(a, key):
    va = value(a)

    parts = key if isinstance(key, tuple) else (key,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (slice, int)) for p in parts)

    def vjp(g):
        full = np.zeros_like(va)
        if basic:
            full[key] += g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _record("getitem", va[key], (a,), vjp)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    va = value(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return _record("sum", np.sum(va, axis=axis, keepdims=keepdims), (a,), vjp)


# --------------------------------------------------------------- elementwise

def exp(a):
    out = np.exp(value(a))
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    va = value(a)
    return _record("log", np.log(va), (a,), lambda g: (g / va,))


def sqrt(a):
    out = np.sqrt(value(a))

    def vjp(g):
        with np.errstate(divide="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return _record("sqrt", out, (a,), vjp)


def sin(a):
    va = value(a)
    return _record("sin", np.sin(va), (a,), lambda g: (g * np.cos(va),))


def arccos(a):
    va = value(a)

    def vjp(g):
        inside = np.abs(va) < ARCCOS_GUARD
        safe = np.where(inside, va, 0.0)
        return (np.where(inside, -g / np.sqrt(1.0 - safe * safe), 0.0),)

    return _record("arccos", np.arccos(va), (a,), vjp)


def clip(a, lo, hi):
    va = value(a)
    return _record("clip", np.clip(va, lo, hi), (a,),
                   lambda g: (g * ((va >= lo) & (va <= hi)),))


def relu(a):
    va = value(a)
    return _record("relu", np.maximum(va, 0.0), (a,), lambda g: (g * (va > 0),))


# ------------------------------------------------------------ matrix helpers

def sq_row_norms(a):
    """Squared Euclidean norm of every row."""
    va = value(a)
    return _record("sq_row_norms", np.einsum("ij,ij->i", va, va), (a,),
                   lambda g: (2.0 * g[:, None] * va,))


def trace(a):
    va = value(a)
    return _record("trace", np.trace(va), (a,), lambda g: (g * np.eye(*va.shape),))


def frobenius_sq(a):
    va = value(a)
    return _record("frobenius_sq", np.sum(va * va), (a,), lambda g: (2.0 * g * va,))


def cholesky(S: np.ndarray, max_jitter: float = 1e-6):
    """Lower Cholesky factor, adding diagonal jitter relative to mean(diag) if needed."""
    S = np.asarray(S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise NumericError("matrix to factor has non-finite entries")
    scale = max(float(np.mean(np.abs(np.diag(S)))), np.finfo(float).tiny)
    jitter = 0.0
    while True:
        try:
            return scipy.linalg.cho_factor(S + jitter * np.eye(len(S)), lower=True)
        except np.linalg.LinAlgError:
            jitter = scale * 1e-12 if jitter == 0.0 else jitter * 100.0
            if jitter > scale * max_jitter:
                raise NumericError("symmetric matrix is not positive definite, even after jitter")


def solve_sym(S, b):
    """x = S^{-1} b for symmetric positive-definite S (Cholesky)."""
    vS, vb = value(S), value(b)
    factor = cholesky(vS)
    x = scipy.linalg.cho_solve(factor, vb)
    nS, nb = _needs(S, b)

    def vjp(g):
        bbar = scipy.linalg.cho_solve(factor, g)
        Sbar = None
        if nS:
            outer = bbar @ x.T if x.ndim == 2 else np.outer(bbar, x)
            Sbar = -0.5 * (outer + outer.T)
        return (Sbar, bbar if nb else None)

    return _record("solve_sym", x, (S, b), vjp)


def softmax_cross_entropy(logits, targets):
    """Mean over rows of -sum(targets * log_softmax(logits))."""
    z = value(logits)
    t = value(targets)
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = z.shape[0]
    out = -np.sum(t * logp) / n

    def vjp(g):
        p = np.exp(logp)
        dz = (p * t.sum(axis=1, keepdims=True) - t) / n
        return (g * dz, -g * logp / n)

    return _record("softmax_xent", np.asarray(out), (logits, targets), vjp)
