"""Global pooling expressed as a product with a pooling vector.

Each (batch, channel) row of a ``[b, c, h, w]`` feature volume is flattened
to length ``hw`` and pooled as ``dot(row, w)``:

* average:   ``w_i = 1 / hw``
* max:       ``w_i = 1`` at the argmax, ``0`` elsewhere
* leaky max: ``w_i = 1`` at the argmax, ``-epsilon`` elsewhere

The max-type vectors depend on the row's own argmax, so the vector is built
per row. Argmax ties resolve to the lowest flat index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContextError, SizeError
from .tensor_core import matvec

DEFAULT_EPSILON = 0.1


class PoolKind(str, enum.Enum):
    AVERAGE = "avg"
    MAX = "max"
    LEAKY_MAX = "lmp"


@dataclass(frozen=True)
class PoolingKernel:
    kind: PoolKind = PoolKind.LEAKY_MAX
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        object.__setattr__(self, "kind", PoolKind(self.kind))
        if self.kind is PoolKind.LEAKY_MAX and not self.epsilon > 0:
            raise ValueError(f"leaky max pooling needs epsilon > 0, got {self.epsilon}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    @property
    def label(self) -> str:
        if self.kind is PoolKind.LEAKY_MAX:
            return f"lmp(eps={self.epsilon:g})"
        return self.kind.value


@dataclass(frozen=True)
class PoolingContext:
    """Saved by :func:`pool_forward`: per-row argmax and the input shape."""

    argmax_index: np.ndarray  # int, shape (b, c)
    input_shape: tuple

    @property
    def spatial_size(self) -> int:
        return self.input_shape[2] * self.input_shape[3]


def make_pooling_vector(kernel: PoolingKernel, x_flat: np.ndarray) -> np.ndarray:
    x_flat = np.asarray(x_flat, dtype=np.float64).ravel()
    hw = x_flat.size
    if hw == 0:
        raise SizeError("pooling vector of an empty input")
    if kernel.kind is PoolKind.AVERAGE:
        return np.full(hw, 1.0 / hw)
    fill = 0.0 if kernel.kind is PoolKind.MAX else -kernel.epsilon
    w = np.full(hw, fill)
    w[int(np.argmax(x_flat))] = 1.0
    return w


def _rows(x):
    if x.ndim != 4:
        raise SizeError(f"pooling expects [b, c, h, w], got shape {x.shape}")
    b, c, h, w = x.shape
    if h * w == 0:
        raise SizeError("pooling over empty spatial dims")
    return x.reshape(b * c, h * w)


def pool_forward(x: np.ndarray, kernel: PoolingKernel):
    """Pool ``x[b, c, h, w]`` to ``[b, c]``; returns ``(y, ctx)``."""
    rows = _rows(x)
    b, c = x.shape[:2]
    idx = np.argmax(rows, axis=1)
    if kernel.kind is PoolKind.AVERAGE:
        y = rows.mean(axis=1)
    else:
        peak = rows[np.arange(rows.shape[0]), idx]
        y = peak
        if kernel.kind is PoolKind.LEAKY_MAX:
            y = peak - kernel.epsilon * (rows.sum(axis=1) - peak)
    ctx = PoolingContext(argmax_index=idx.reshape(b, c), input_shape=tuple(x.shape))
    return y.reshape(b, c), ctx


def pool_forward_matvec(x: np.ndarray, kernel: PoolingKernel) -> np.ndarray:
    """Reference path: one explicit pooling-vector matvec per row.

    Slower than :func:`pool_forward` but literally ``X~ w`` row by row.
    """
    rows = _rows(x)
    out = np.empty(rows.shape[0])
    for r, row in enumerate(rows):
        out[r] = matvec(row[None, :], make_pooling_vector(kernel, row))[0]
    return out.reshape(x.shape[:2])


def pool_backward(grad_out: np.ndarray, ctx: PoolingContext, kernel: PoolingKernel) -> np.ndarray:
    """Scatter ``grad_out[b, c]`` through the pooling vector of each row.

    The argmax saved in ``ctx`` is held fixed, so at ties this is a
    subgradient, as for ordinary max pooling.
    """
    b, c, h, w = ctx.input_shape
    if grad_out.shape != (b, c) or ctx.argmax_index.shape != (b, c):
        raise ContextError(f"grad_out {grad_out.shape} does not match forward input {ctx.input_shape}")
    hw = h * w
    if np.any(ctx.argmax_index < 0) or np.any(ctx.argmax_index >= hw):
        raise ContextError("argmax index outside the spatial extent")
    g = grad_out.reshape(-1)
    if kernel.kind is PoolKind.AVERAGE:
        grad = np.repeat((g / hw)[:, None], hw, axis=1)
    else:
        fill = 0.0 if kernel.kind is PoolKind.MAX else -kernel.epsilon
        grad = np.outer(g, np.full(hw, fill))
        grad[np.arange(g.size), ctx.argmax_index.reshape(-1)] = g
    return grad.reshape(b, c, h, w)
