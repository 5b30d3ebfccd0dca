"""Dense float64 arrays and explicit forward/backward layer pairs.

Tensors are plain ``numpy.ndarray`` objects in C (row-major) order with
dtype float64. Every layer is a pair of pure functions: the forward
returns its output (and whatever the backward needs), the backward maps an
upstream gradient to gradients of the inputs. There is no graph.

The on-disk format ``LMPT1`` is::

    b"LMPTENS1" | uint32 rank | rank x uint32 dims | float32 data (row-major)

all little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import LabelError, NonFiniteError, SizeError

MAGIC = b"LMPTENS1"


def as_tensor(data, shape=None) -> np.ndarray:
    """Return ``data`` as a float64 C-ordered array, optionally reshaped."""
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        arr = reshape(arr, shape)
    return arr


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return arr


def _debug_finite(arr, what):
    if __debug__:
        check_finite(arr, what)
    return arr


def reshape(t: np.ndarray, new_shape) -> np.ndarray:
    new_shape = tuple(int(s) for s in new_shape)
    if int(np.prod(new_shape, dtype=np.int64)) != t.size:
        raise SizeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    return np.reshape(t, new_shape)


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``out[i] = sum_j m[i, j] * v[j]``."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise SizeError(f"matvec shape mismatch: {m.shape} x {v.shape}")
    return _debug_finite(m @ v, "matvec output")


# --- convolution -----------------------------------------------------------


def pad_pair(pad) -> tuple:
    """``pad`` as ``(before, after)``; an int pads both sides equally."""
    before, after = (pad, pad) if np.isscalar(pad) else tuple(pad)
    if before < 0 or after < 0:
        raise SizeError(f"invalid pad={pad}")
    return int(before), int(after)


def conv_output_size(size: int, ksize: int, stride: int, pad) -> int:
    before, after = pad_pair(pad)
    if stride < 1:
        raise SizeError(f"invalid stride={stride}")
    if ksize > size + before + after:
        raise SizeError(f"kernel {ksize} larger than padded input {size + before + after}")
    return (size + before + after - ksize) // stride + 1


def _conv_geometry(x, k, stride, pad):
    if x.ndim != 4 or k.ndim != 4:
        raise SizeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise SizeError(f"kernel expects {kcin} input channels, input has {cin}")
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    return b, cin, h, w, cout, kh, kw, oh, ow


def _pad_nhwc(x, pad):
    before, after = pad_pair(pad)
    xt = x.transpose(0, 2, 3, 1)
    if before or after:
        xt = np.pad(xt, ((0, 0), (before, after), (before, after), (0, 0)))
    return xt


def _patches(xp, kh, kw, stride, oh, ow):
    """Rows are receptive fields: ``[b*oh*ow, cin*kh*kw]`` in (cin, kh, kw) order."""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    return win.reshape(-1, win.shape[3] * kh * kw)


def conv2d_forward(x: np.ndarray, k: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x[b, cin, h, w]`` with ``k[cout, cin, kh, kw]``.

    ``pad`` zero cells on every side, or ``(before, after)`` cells on the
    top/left and bottom/right of both spatial axes. Receptive fields are
    gathered into one patch matrix so the whole layer is a single product.
    """
    b, cin, h, w, cout, kh, kw, oh, ow = _conv_geometry(x, k, stride, pad)
    cols = _patches(_pad_nhwc(x, pad), kh, kw, stride, oh, ow)
    out = (cols @ k.reshape(cout, -1).T).reshape(b, oh, ow, cout)
    return _debug_finite(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), "conv2d output")


def conv2d_backward(x: np.ndarray, k: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, pad: int = 0):
    """Return ``(grad_x, grad_k)`` for :func:`conv2d_forward`."""
    b, cin, h, w, cout, kh, kw, oh, ow = _conv_geometry(x, k, stride, pad)
    if grad_out.shape != (b, cout, oh, ow):
        raise SizeError(f"grad_out shape {grad_out.shape} != {(b, cout, oh, ow)}")
    xp = _pad_nhwc(x, pad)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
    grad_k = (g.T @ _patches(xp, kh, kw, stride, oh, ow)).reshape(k.shape)
    grad_cols = (g @ k.reshape(cout, -1)).reshape(b, oh, ow, cin, kh, kw)
    grad_xp = np.zeros(xp.shape)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride, :] \
                += grad_cols[..., i, j]
    before, _ = pad_pair(pad)
    grad_xp = grad_xp[:, before:before + h, before:before + w, :]
    grad_x = np.ascontiguousarray(grad_xp.transpose(0, 3, 1, 2))
    return _debug_finite(grad_x, "conv2d grad_x"), _debug_finite(grad_k, "conv2d grad_k")


# --- elementwise and dense layers -------------------------------------------


def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_bwd(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ReLU; the derivative at exactly 0 is taken as 0."""
    return grad_out * (x > 0)


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``y = x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise SizeError(f"linear shape mismatch: x{x.shape} w{w.shape} b{b.shape}")
    return _debug_finite(x @ w.T + b, "linear output")


def linear_bwd(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, grad_w, grad_b)``."""
    return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise LabelError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"label outside [0, {num_classes})")
    return labels


def softmax_xent_fwd(logits: np.ndarray, labels):
    """Mean softmax cross-entropy over the batch.

    Returns ``(loss, probs)``; ``probs`` is the cache for the backward pass.
    """
    b, n = logits.shape
    labels = _check_labels(labels, n)
    if labels.shape[0] != b:
        raise SizeError(f"{labels.shape[0]} labels for batch of {b}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    loss = -log_p[np.arange(b), labels].mean()
    return float(loss), np.exp(log_p)


def softmax_xent_bwd(probs: np.ndarray, labels) -> np.ndarray:
    """Gradient of the mean loss w.r.t. the logits: ``(p - onehot) / b``."""
    b, n = probs.shape
    labels = _check_labels(labels, n)
    grad = probs.copy()
    grad[np.arange(b), labels] -= 1.0
    return grad / b


# --- LMPT1 file format --------------------------------------------------------


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    header = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    if blob[:8] != MAGIC:
        raise ValueError("not an LMPT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 8)
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(blob) - offset != 4 * count:
        raise SizeError(f"LMPT1 payload holds {(len(blob) - offset) // 4} values, header says {count}")
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def save_tensor(path, t: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
