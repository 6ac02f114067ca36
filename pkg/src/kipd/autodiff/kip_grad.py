from __future__ import annotations

import numpy as np

from kipd.autodiff.engine import Tape
from kipd.errors import NumericError


def grad_kip_loss(support, target, kernel, lam: float = 1e-6, wrt: str = "both",
                  mask=None, reg_mode: str = "scale_invariant"):
    """Loss value and gradients of the KRR loss with respect to the support set.

    Returns ``(loss, grad_X, grad_y)``; a gradient not requested by ``wrt``
    ("X_s", "y_s" or "both") is None. Gradient entries at coordinates frozen
    by ``mask`` (a CorruptionMask or boolean array shaped like X_s) are zero.
    The scale-invariant regularizer stays inside the differentiated graph.
    """
    from kipd.krr import kip_loss

    if wrt not in ("X_s", "y_s", "both"):
        raise ValueError(f"wrt must be 'X_s', 'y_s' or 'both', got {wrt!r}")
    X_s, y_s = (np.asarray(a, dtype=np.float64) for a in support)
    with Tape() as tape:
        Xn = tape.variable(X_s, "X_s") if wrt in ("X_s", "both") else X_s
        yn = tape.variable(y_s, "y_s") if wrt in ("y_s", "both") else y_s
        loss = kip_loss((Xn, yn), target, kernel, lam, reg_mode)
        leaves = [n for n in (Xn, yn) if n is not X_s and n is not y_s]
        grads = tape.gradient(loss, leaves)
    gX = grads.pop(0) if wrt in ("X_s", "both") else None
    gy = grads.pop(0) if wrt in ("y_s", "both") else None
    if gX is not None and mask is not None:
        frozen = getattr(mask, "frozen", mask)
        gX = np.where(frozen, 0.0, gX)
    value = float(loss.value)
    if not np.isfinite(value):
        raise NumericError("KIP loss is not finite")
    return value, gX, gy
