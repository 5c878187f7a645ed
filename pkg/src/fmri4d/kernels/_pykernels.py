"""Numpy implementations of the convolution kernels.

All kernels work on four spatial axes: ``x[N, Ci, X, Y, Z, T]`` and
``w[Co, Ci, KX, KY, KZ, KT]``. Rank-3 callers append a unit T axis.
Cross-correlation convention (no kernel flip).
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_SPATIAL = (2, 3, 4, 5)


def out_extents(in_ext, kernel, stride, pad) -> tuple[int, ...]:
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(in_ext, kernel, stride, pad))


def _padded(x: np.ndarray, pad) -> np.ndarray:
    if not any(pad):
        return x
    return np.pad(x, ((0, 0), (0, 0)) + tuple((p, p) for p in pad))


def _tap(xp: np.ndarray, offset, stride, out) -> tuple:
    return (slice(None), slice(None)) + tuple(
        slice(k, k + s * (o - 1) + 1, s) for k, s, o in zip(offset, stride, out)
    )


def conv_direct(x: np.ndarray, w: np.ndarray, stride, pad) -> np.ndarray:
    """Shift-and-accumulate: one small GEMM per kernel tap, no patch matrix."""
    n, _, *in_ext = x.shape
    co, _, *kernel = w.shape
    out = out_extents(in_ext, kernel, stride, pad)
    xp = _padded(x, pad)
    acc = np.zeros((co, n) + out, dtype=x.dtype)
    for offset in itertools.product(*(range(k) for k in kernel)):
        patch = xp[_tap(xp, offset, stride, out)]
        acc += np.tensordot(w[(slice(None), slice(None)) + offset], patch, axes=([1], [1]))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4, 5))


def im2col(x: np.ndarray, kernel, stride, pad) -> np.ndarray:
    """Patch matrix of shape ``(Ci*KX*KY*KZ*KT, N*OX*OY*OZ*OT)``."""
    n, ci, *in_ext = x.shape
    out = out_extents(in_ext, kernel, stride, pad)
    xp = _padded(x, pad)
    v = sliding_window_view(xp, tuple(kernel), axis=_SPATIAL)
    v = v[(slice(None), slice(None)) + tuple(slice(None, s * (o - 1) + 1, s) for s, o in zip(stride, out))]
    # (N, Ci, O..., K...) -> (Ci, K..., N, O...)
    cols = v.transpose(1, 6, 7, 8, 9, 0, 2, 3, 4, 5)
    return np.ascontiguousarray(cols).reshape(ci * int(np.prod(kernel)), n * int(np.prod(out)))


def col2im(cols: np.ndarray, x_shape, kernel, stride, pad) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch columns back onto the input grid."""
    n, ci, *in_ext = x_shape
    out = out_extents(in_ext, kernel, stride, pad)
    c = cols.reshape((ci,) + tuple(kernel) + (n,) + out)
    padded_ext = tuple(e + 2 * p for e, p in zip(in_ext, pad))
    dxp = np.zeros((n, ci) + padded_ext, dtype=cols.dtype)
    for offset in itertools.product(*(range(k) for k in kernel)):
        dxp[_tap(dxp, offset, stride, out)] += c[(slice(None),) + offset].swapaxes(0, 1)
    return np.ascontiguousarray(dxp[(slice(None), slice(None)) + tuple(slice(p, p + e) for p, e in zip(pad, in_ext))])
