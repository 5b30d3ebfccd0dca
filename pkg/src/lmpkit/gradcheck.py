"""Central finite differences for checking hand-written backward passes."""

from __future__ import annotations

import numpy as np

DEFAULT_STEP = 1e-5


def numeric_grad(f, x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Gradient of scalar ``f()`` w.r.t. ``x``, perturbing ``x`` in place.

    ``f`` takes no arguments and must read ``x`` afresh on every call.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
